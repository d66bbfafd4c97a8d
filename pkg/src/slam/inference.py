"""Posterior summarization: latency estimates and intervals, group
contrasts, amplitude extraction from fitted-curve realizations, pointwise
curve bands, and split-chain convergence diagnostics.

Amplitude methods operate on per-draw posterior curve realizations. Each
realization is drawn at the grid points; inside a component's search
range the curve is re-evaluated on a refined grid through the exact GP
conditional mean given the drawn values (no polynomial interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .blas import uses_single_threaded_blas
from .data_model import WaveformDataset
from .errors import SlamError, ValidationError
from .kernel import KernelHyper, k00, k01, k11
from .rng import substream

__all__ = [
    "PosteriorChain",
    "AmplitudeSamples",
    "ContrastResult",
    "pool_chains",
    "latency_summary",
    "group_contrast",
    "attach_paths",
    "max_peak",
    "half_integral_peak",
    "mean_window_amplitude",
    "rhat",
    "curve_band",
]


@dataclass
class PosteriorChain:
    """Ordered post-burn-in, thinned draws from one chain.

    Arrays are indexed (draw, ...) with subjects in canonical dataset
    order. `paths` (draw-subsampled posterior curve realizations at grid
    points) appear after `attach_paths`.
    """

    chain_id: int
    t: np.ndarray  # (D, n_series, M)
    beta0: np.ndarray  # (D, M)
    beta: np.ndarray  # (D, p, M)
    eta: np.ndarray  # (D, G, M)
    sigma2: np.ndarray  # (D,)
    r: np.ndarray  # (D, G, M)
    groups: tuple[str, ...]
    subjects: tuple[tuple[str, str], ...]
    windows: tuple[tuple[float, float], ...]
    effect_names: tuple[str, ...]
    acceptance: dict = field(default_factory=dict)
    paths: np.ndarray | None = None  # (Dp, n_series, n)
    path_indices: np.ndarray | None = None
    path_grid: np.ndarray | None = None
    path_context: dict | None = None

    def __post_init__(self):
        if self.sigma2.size == 0:
            raise ValidationError("empty chain")

    @property
    def n_draws(self) -> int:
        return self.sigma2.size

    @property
    def n_components(self) -> int:
        return self.t.shape[2]

    @property
    def n_series(self) -> int:
        return self.t.shape[1]

    def subject_id(self, j: int) -> str:
        g, s = self.subjects[j]
        return f"{g}/{s}"

    def latency_times(self) -> np.ndarray:
        """Group-level latencies on the time scale, (D, G, M)."""
        a = np.array([w[0] for w in self.windows])
        b = np.array([w[1] for w in self.windows])
        return (1.0 - self.r) * a[None, None, :] + self.r * b[None, None, :]

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> (D,) mapping of every scalar parameter."""
        out = {}
        for j, (g, s) in enumerate(self.subjects):
            for m in range(self.n_components):
                out[f"t[{g}/{s},m={m + 1}]"] = self.t[:, j, m]
        for m in range(self.n_components):
            out[f"beta0[m={m + 1}]"] = self.beta0[:, m]
            for a, name in enumerate(self.effect_names):
                out[f"beta[{name},m={m + 1}]"] = self.beta[:, a, m]
            for g, label in enumerate(self.groups):
                out[f"eta[{label},m={m + 1}]"] = self.eta[:, g, m]
                out[f"r[{label},m={m + 1}]"] = self.r[:, g, m]
        out["sigma2"] = self.sigma2
        return out


def pool_chains(chains) -> PosteriorChain:
    """Concatenate several chains into one pooled pseudo-chain (id 0)."""
    chains = list(chains)
    if not chains:
        raise ValidationError("no chains to pool")
    first = chains[0]
    if len(chains) == 1:
        return first
    # Curve realizations do not pool (each chain subsamples its own
    # draws); attach_paths on the pooled chain instead.
    return replace(
        first,
        chain_id=0,
        t=np.concatenate([c.t for c in chains]),
        beta0=np.concatenate([c.beta0 for c in chains]),
        beta=np.concatenate([c.beta for c in chains]),
        eta=np.concatenate([c.eta for c in chains]),
        sigma2=np.concatenate([c.sigma2 for c in chains]),
        r=np.concatenate([c.r for c in chains]),
        acceptance={},
        paths=None,
        path_indices=None,
        path_grid=None,
        path_context=None,
    )


def _interval(draws: np.ndarray, level: float) -> tuple[float, float]:
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def latency_summary(chain: PosteriorChain, level: float = 0.95) -> dict:
    """Point estimates and equal-tailed intervals for every latency.

    Returns {"subjects": [...], "groups": [...]} where subject rows
    summarize t draws and group rows summarize r draws plus their
    time-scale transform.
    """
    subjects = []
    for j, (g, s) in enumerate(chain.subjects):
        for m in range(chain.n_components):
            draws = chain.t[:, j, m]
            lo, hi = _interval(draws, level)
            subjects.append(
                {
                    "group": g,
                    "subject": s,
                    "component": m + 1,
                    "mean": float(draws.mean()),
                    "median": float(np.median(draws)),
                    "lower": lo,
                    "upper": hi,
                }
            )
    groups = []
    times = chain.latency_times()
    for g, label in enumerate(chain.groups):
        for m in range(chain.n_components):
            r_draws = chain.r[:, g, m]
            t_draws = times[:, g, m]
            r_lo, r_hi = _interval(r_draws, level)
            t_lo, t_hi = _interval(t_draws, level)
            groups.append(
                {
                    "group": label,
                    "component": m + 1,
                    "r_mean": float(r_draws.mean()),
                    "r_median": float(np.median(r_draws)),
                    "r_lower": r_lo,
                    "r_upper": r_hi,
                    "time_mean": float(t_draws.mean()),
                    "time_median": float(np.median(t_draws)),
                    "time_lower": t_lo,
                    "time_upper": t_hi,
                }
            )
    return {"subjects": subjects, "groups": groups, "level": level}


@dataclass
class ContrastResult:
    first: tuple[str, int]
    second: tuple[str, int]
    draws: np.ndarray
    mean: float
    lower: float
    upper: float
    prob_greater: float


def group_contrast(chain: PosteriorChain, pairs, level: float = 0.95):
    """Posterior of time-scale latency differences.

    `pairs` is a sequence of ((group, component), (group, component))
    with 1-based components; each result summarizes second - first,
    e.g. (older, m) vs (young, m) gives the delay of the older group.
    Within-group lag contrasts use the same group twice with different
    components.
    """
    times = chain.latency_times()
    results = []
    for (g1, m1), (g2, m2) in pairs:
        try:
            i1, i2 = chain.groups.index(g1), chain.groups.index(g2)
        except ValueError as exc:
            raise ValidationError(f"unknown group in contrast: {exc}") from exc
        d = times[:, i2, m2 - 1] - times[:, i1, m1 - 1]
        lo, hi = _interval(d, level)
        results.append(
            ContrastResult(
                first=(g1, m1),
                second=(g2, m2),
                draws=d,
                mean=float(d.mean()),
                lower=lo,
                upper=hi,
                prob_greater=float(np.mean(d > 0)),
            )
        )
    return results


# ---------------------------------------------------------------------------
# Posterior curve realizations


class _CurveEngine:
    """Per-draw posterior curve realizations and refined re-evaluation.

    The amplitude is tied to the noise level (tau^2 = tau0^2 sigma^2),
    so after cancellation the posterior mean of f given the data is
    tau0^2 S_u A^{-1} y and the covariance sigma^2 tau0^2
    (S_u - tau0^2 S_u A^{-1} S_u), where S_u is the unit-amplitude
    constrained prior covariance and A = tau0^2 S_u + I.
    """

    def __init__(self, grid, tau0, h, jitter=1e-8):
        self.grid = np.asarray(grid, dtype=float)
        self.tau0 = float(tau0)
        self.h = float(h)
        self.jitter = float(jitter)
        self.unit = KernelHyper(tau=1.0, h=self.h)
        self.k00_grid = k00(self.grid, self.grid, self.unit)
        self.n = self.grid.size
        self.eye = np.eye(self.n)

    def _unit_cov(self, t):
        K01 = k01(self.grid, t, self.unit)
        K11 = k11(t, t, self.unit) + (self.jitter / self.h**2) * np.eye(t.size)
        L11 = np.linalg.cholesky(K11)
        W = sla.cho_solve((L11, True), K01.T)
        Su = self.k00_grid - K01 @ W
        return 0.5 * (Su + Su.T), L11

    def realization(self, y, t, sigma2, rng, x_ref=None):
        """One posterior curve draw at the grid, plus its refined
        re-evaluation at x_ref (through the GP conditional mean given the
        drawn grid values)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        Su, L11 = self._unit_cov(t)
        A = self.tau0**2 * Su + self.eye
        LA = np.linalg.cholesky(A)
        Ainv_y = sla.cho_solve((LA, True), y)
        mean = self.tau0**2 * (Su @ Ainv_y)
        Ainv_Su = sla.cho_solve((LA, True), Su)
        cov = sigma2 * self.tau0**2 * (Su - self.tau0**2 * (Su @ Ainv_Su))
        cov = 0.5 * (cov + cov.T)
        jit = self.jitter * max(float(np.mean(np.diag(cov))), 1e-12)
        Lc = np.linalg.cholesky(cov + jit * self.eye)
        path = mean + Lc @ rng.standard_normal(self.n)
        ref = None
        if x_ref is not None and x_ref.size:
            cross = k00(x_ref, self.grid, self.unit) - k01(
                x_ref, t, self.unit
            ) @ sla.cho_solve((L11, True), k01(self.grid, t, self.unit).T)
            Ls = np.linalg.cholesky(Su + self.jitter * self.eye)
            ref = cross @ sla.cho_solve((Ls, True), path)
        return path, ref


@uses_single_threaded_blas
def attach_paths(
    chain: PosteriorChain,
    dataset: WaveformDataset,
    tau0: float,
    h: float,
    *,
    count: int = 500,
    refine: int = 10,
    seed: int = 0,
    jitter: float = 1e-8,
) -> PosteriorChain:
    """Draw posterior curve realizations for a subsample of the chain.

    Stores grid-point paths plus, per (subject, component), the refined
    re-evaluation over that subject's latency range (the span of its own
    t draws), at `refine` times the grid density. Mutates and returns
    the chain.
    """
    rng = substream(seed, "paths", chain.chain_id)
    D = chain.n_draws
    count = min(count, D)
    idx = np.linspace(0, D - 1, count).astype(int)
    engine = _CurveEngine(dataset.grid.points, tau0, h, jitter)
    grid = dataset.grid.points
    step = (grid[-1] - grid[0]) / (grid.size - 1) / refine
    n_series = chain.n_series
    M = chain.n_components
    paths = np.empty((count, n_series, grid.size))
    ref_grids = []
    ref_values = []
    for j in range(n_series):
        sub_grids = []
        for m in range(M):
            tmin = float(chain.t[idx, j, m].min())
            tmax = float(chain.t[idx, j, m].max())
            if tmax - tmin < step:
                sub_grids.append(np.array([0.5 * (tmin + tmax)]))
            else:
                sub_grids.append(np.arange(tmin, tmax + 0.5 * step, step))
        ref_grids.append(sub_grids)
        ref_values.append(
            [np.empty((count, sg.size)) for sg in sub_grids]
        )
    for d_out, d in enumerate(idx):
        sigma2 = float(chain.sigma2[d])
        for j in range(n_series):
            g, s = chain.subjects[j]
            y = dataset.series(chain.groups.index(g), _subject_pos(dataset, g, s))
            x_ref = np.concatenate(ref_grids[j])
            path, ref = engine.realization(y, chain.t[d, j], sigma2, rng, x_ref)
            paths[d_out, j] = path
            offset = 0
            for m in range(M):
                size = ref_grids[j][m].size
                ref_values[j][m][d_out] = ref[offset : offset + size]
                offset += size
    chain.paths = paths
    chain.path_indices = idx
    chain.path_grid = grid
    chain.path_context = {
        "tau0": float(tau0),
        "h": float(h),
        "refine": refine,
        "ref_grids": ref_grids,
        "ref_values": ref_values,
    }
    return chain


def _subject_pos(dataset: WaveformDataset, group: str, subject: str) -> int:
    g = dataset.groups.index(group)
    return dataset.subject_labels[g].index(subject)


def _require_paths(chain: PosteriorChain):
    if chain.paths is None or chain.path_context is None:
        raise SlamError("chain has no curve realizations; call attach_paths first")


@dataclass
class AmplitudeSamples:
    """Posterior amplitude draws for one subject and component."""

    group: str
    subject: str
    component: int
    method: str
    window: tuple[float, float]
    baseline: float
    values: np.ndarray
    flagged: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.values))


def _component_window(chain, j, m, source="subject"):
    ctx = chain.path_context
    if source == "subject":
        sg = ctx["ref_grids"][j][m]
        return float(sg[0]), float(sg[-1])
    if source == "group":
        g = chain.groups.index(chain.subjects[j][0])
        times = chain.latency_times()[:, g, m]
        return float(times.min()), float(times.max())
    raise ValidationError(f"unknown window source {source!r}")


def max_peak(
    chain: PosteriorChain,
    component: int,
    orientation: str = "peak",
    baseline: float = 0.0,
    window_source: str = "subject",
) -> list[AmplitudeSamples]:
    """Largest local extremum of each curve realization over the
    component's latency range (per draw), minus the baseline.

    `orientation` 'peak' takes the maximum, 'dip' the minimum. The
    search window is the span of the subject's own latency draws
    (`window_source='group'` uses the group-level range instead).
    """
    _require_paths(chain)
    if orientation not in ("peak", "dip"):
        raise ValidationError("orientation must be 'peak' or 'dip'")
    m = component - 1
    ctx = chain.path_context
    out = []
    for j, (g, s) in enumerate(chain.subjects):
        vals = ctx["ref_values"][j][m]
        if window_source == "group":
            lo, hi = _component_window(chain, j, m, "group")
            sg = ctx["ref_grids"][j][m]
            mask = (sg >= lo) & (sg <= hi)
            use = vals[:, mask] if mask.any() else vals
        else:
            use = vals
        z = use.max(axis=1) if orientation == "peak" else use.min(axis=1)
        out.append(
            AmplitudeSamples(
                group=g,
                subject=s,
                component=component,
                method="max-peak",
                window=_component_window(chain, j, m, window_source),
                baseline=float(baseline),
                values=z - baseline,
            )
        )
    return out


def half_integral_peak(
    chain: PosteriorChain,
    component: int,
    baseline: float = 0.0,
    window_source: str = "subject",
) -> list[AmplitudeSamples]:
    """Curve value at the point splitting the window integral in half.

    Uses the cumulative trapezoid of the refined curve and linear
    bracketing between refined points. When a sign-changing integrand
    makes the half-point non-unique, the smallest valid crossing is
    taken and the draw flagged.
    """
    _require_paths(chain)
    m = component - 1
    ctx = chain.path_context
    out = []
    for j, (g, s) in enumerate(chain.subjects):
        sg = ctx["ref_grids"][j][m]
        vals = ctx["ref_values"][j][m]
        count = vals.shape[0]
        z = np.empty(count)
        flagged = np.zeros(count, dtype=bool)
        if sg.size == 1:
            z[:] = vals[:, 0] - baseline
        else:
            dx = np.diff(sg)
            for d in range(count):
                f = vals[d]
                seg = 0.5 * (f[1:] + f[:-1]) * dx
                cum = np.concatenate([[0.0], np.cumsum(seg)])
                half = 0.5 * cum[-1]
                crossings = np.nonzero(
                    ((cum[:-1] - half) <= 0) & ((cum[1:] - half) >= 0)
                    | ((cum[:-1] - half) >= 0) & ((cum[1:] - half) <= 0)
                )[0]
                if crossings.size == 0:
                    k = int(np.argmin(np.abs(cum - half)))
                    t_half = sg[k]
                    flagged[d] = True
                else:
                    flagged[d] = crossings.size > 1
                    k = int(crossings[0])
                    c0, c1 = cum[k], cum[k + 1]
                    frac = 0.0 if c1 == c0 else (half - c0) / (c1 - c0)
                    t_half = sg[k] + frac * dx[k]
                fk = np.interp(t_half, sg, f)
                z[d] = fk - baseline
        out.append(
            AmplitudeSamples(
                group=g,
                subject=s,
                component=component,
                method="half-integral",
                window=_component_window(chain, j, m, window_source),
                baseline=float(baseline),
                values=z,
                flagged=flagged,
            )
        )
    return out


def mean_window_amplitude(
    chain: PosteriorChain,
    window: tuple[float, float],
    baseline: float = 0.0,
) -> list[AmplitudeSamples]:
    """Trapezoidal mean of each curve realization over a fixed window."""
    _require_paths(chain)
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValidationError("window must satisfy a < b")
    grid = chain.path_grid
    step = (grid[-1] - grid[0]) / (grid.size - 1)
    out = []
    for j, (g, s) in enumerate(chain.subjects):
        paths = chain.paths[:, j, :]
        if hi - lo < step:
            k = int(np.argmin(np.abs(grid - 0.5 * (lo + hi))))
            z = paths[:, k]
        else:
            mask = (grid >= lo) & (grid <= hi)
            xs = grid[mask]
            z = np.trapezoid(paths[:, mask], xs, axis=1) / (xs[-1] - xs[0])
        out.append(
            AmplitudeSamples(
                group=g,
                subject=s,
                component=0,
                method="mean-window",
                window=(lo, hi),
                baseline=float(baseline),
                values=z - baseline,
            )
        )
    return out


def curve_band(chain: PosteriorChain, level: float = 0.95) -> list[dict]:
    """Pointwise mean and equal-tailed band of the curve realizations."""
    _require_paths(chain)
    alpha = 1.0 - level
    out = []
    for j, (g, s) in enumerate(chain.subjects):
        paths = chain.paths[:, j, :]
        lo, hi = np.quantile(paths, [alpha / 2, 1 - alpha / 2], axis=0)
        out.append(
            {
                "group": g,
                "subject": s,
                "x": chain.path_grid,
                "mean": paths.mean(axis=0),
                "lower": lo,
                "upper": hi,
            }
        )
    return out


def rhat(chains) -> dict[str, float]:
    """Split-chain potential scale reduction factor per scalar parameter."""
    chains = list(chains)
    if len(chains) < 2:
        raise ValidationError("rhat requires at least 2 chains")
    length = min(c.n_draws for c in chains)
    if length < 4:
        raise ValidationError("chains too short for split-chain diagnostics")
    names = chains[0].parameter_arrays().keys()
    per_chain = [c.parameter_arrays() for c in chains]
    out = {}
    half = length // 2
    for name in names:
        segments = []
        for arrs in per_chain:
            x = arrs[name][:length]
            segments.append(x[:half])
            segments.append(x[half : 2 * half])
        sims = np.asarray(segments)
        out[name] = _psrf(sims)
    return out


def _psrf(sims: np.ndarray) -> float:
    k, n = sims.shape
    chain_means = sims.mean(axis=1)
    W = float(np.mean(np.var(sims, axis=1, ddof=1)))
    B = n * float(np.var(chain_means, ddof=1))
    if W == 0.0:
        return 1.0 if B == 0.0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))
