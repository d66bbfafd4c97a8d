"""Run configuration: priors, sampler schedule, proposal tuning, and
initialization, with JSON round-tripping for reproducible runs.

Distribution conventions are fixed package-wide and echoed into every
manifest: gamma priors are shape-rate, inverse-gamma priors shape-scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ValidationError

__all__ = ["PriorSpec", "RunConfig", "GAMMA_CONVENTION", "INVGAMMA_CONVENTION"]

GAMMA_CONVENTION = "shape-rate"
INVGAMMA_CONVENTION = "shape-scale"


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the latent hierarchy priors.

    Normal priors on intercepts (mu0, sd0) and effects (mu1, sd1); a
    shape-rate gamma on the latency-prior scales; a shape-scale inverse
    gamma on the noise variance.
    """

    mu0: float = 0.0
    sd0: float = 1.0
    mu1: float = 0.0
    sd1: float = 1.0
    alpha_eta: float = 0.5
    beta_eta: float = 0.5
    alpha_sigma: float = 0.5
    beta_sigma: float = 0.5

    def __post_init__(self):
        for name in ("sd0", "sd1", "alpha_eta", "beta_eta", "alpha_sigma", "beta_sigma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"prior parameter {name} must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything a fit needs besides the data itself."""

    seed: int = 1
    windows: tuple[tuple[float, float], ...] = ((0.0, 0.5), (0.5, 1.0))
    window_unit: str = "grid"  # "grid" | "normalized"
    time_unit: str = "design"
    design_kind: str = "one-way"
    baseline: str | None = None
    link: str = "logit"
    priors: PriorSpec = field(default_factory=PriorSpec)
    eta_fixed: float | None = None

    # Monte Carlo E-step / EM schedule
    estep_draws: int = 2100
    estep_burnin: int = 100
    mstep_subsample: int = 500
    epsilon: float = 1e-5
    max_em_iters: int = 100
    estep_rng: str = "common"  # "common" | "fresh"
    # Damping of the M-step update (stochastic-approximation step size):
    # once the raw argmax move falls below damping_threshold, the step
    # size shrinks geometrically by mstep_damping per iteration, which
    # lets the epsilon stopping rule terminate despite Monte Carlo
    # noise. Set mstep_damping=1 for the undamped update.
    mstep_damping: float = 0.6
    damping_threshold: float = 0.05
    estep_adapt_iters: int = 5

    # Final sampling run
    final_total: int = 21000
    final_burnin: int = 1000
    thin: int = 10
    chains: int = 4

    # Proposal tuning. Each stationary-point coordinate proposes from a
    # mixture: truncated-normal random walk with probability
    # 1 - t_uniform_mix, independent Uniform(a, b) otherwise. The
    # uniform component lets chains escape spurious boundary modes that
    # a purely local walk cannot leave.
    t_uniform_mix: float = 0.10
    adapt_every: int = 40
    adapt_factor: float = 1.25
    accept_band_t: tuple[float, float] = (0.25, 0.45)
    accept_band_beta: tuple[float, float] = (0.20, 0.40)
    accept_band_eta: tuple[float, float] = (0.20, 0.40)

    # Initial values (None selects data-driven defaults)
    init_sigma2: float = 1.0
    init_eta: float = 1.0
    init_beta: float = 0.0
    init_tau0: float | None = None
    init_h: float | None = None

    # Numerics
    jitter: float = 1e-8
    min_separation: float | None = None

    # Posterior summaries
    paths_per_chain: int = 500
    path_refine: int = 10
    amplitude_method: str = "max-peak"
    amplitude_baseline: float = 0.0
    credible_level: float = 0.95

    threads: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        positive = {
            "estep_draws": self.estep_draws,
            "mstep_subsample": self.mstep_subsample,
            "epsilon": self.epsilon,
            "max_em_iters": self.max_em_iters,
            "final_total": self.final_total,
            "thin": self.thin,
            "chains": self.chains,
            "adapt_every": self.adapt_every,
            "paths_per_chain": self.paths_per_chain,
        }
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ValidationError([f"{k} must be positive" for k in bad])
        if self.estep_burnin < 0 or self.estep_burnin >= self.estep_draws:
            raise ValidationError("estep_burnin must be in [0, estep_draws)")
        if self.final_burnin < 0 or self.final_burnin >= self.final_total:
            raise ValidationError("final_burnin must be in [0, final_total)")
        if self.estep_rng not in ("common", "fresh"):
            raise ValidationError("estep_rng must be 'common' or 'fresh'")
        if not 0 < self.mstep_damping <= 1:
            raise ValidationError("mstep_damping must be in (0, 1]")
        if not 0 <= self.t_uniform_mix < 1:
            raise ValidationError("t_uniform_mix must be in [0, 1)")
        if self.window_unit not in ("grid", "normalized"):
            raise ValidationError("window_unit must be 'grid' or 'normalized'")
        if not 0 < self.credible_level < 1:
            raise ValidationError("credible_level must be in (0, 1)")
        object.__setattr__(
            self, "windows", tuple((float(a), float(b)) for a, b in self.windows)
        )

    @property
    def estep_retained(self) -> int:
        return self.estep_draws - self.estep_burnin

    def to_dict(self) -> dict:
        out = asdict(self)
        out["windows"] = [list(w) for w in self.windows]
        out["gamma_convention"] = GAMMA_CONVENTION
        out["invgamma_convention"] = INVGAMMA_CONVENTION
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        data.pop("gamma_convention", None)
        data.pop("invgamma_convention", None)
        if "priors" in data and isinstance(data["priors"], dict):
            data["priors"] = PriorSpec(**data["priors"])
        if "windows" in data:
            data["windows"] = tuple(tuple(w) for w in data["windows"])
        for key in ("accept_band_t", "accept_band_beta", "accept_band_eta"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def updated(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)
