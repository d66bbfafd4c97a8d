"""slam: stationary-point latency and amplitude modeling for
multi-subject waveform data.

Smooth per-subject curves are modeled with a Gaussian process
constrained to have zero derivative at component latencies; latencies
are tied across subjects by a latent factor regression through a link
function; kernel hyperparameters are tuned by Monte Carlo EM; latency
and amplitude posteriors come from the final Metropolis-within-Gibbs
chains.
"""

from .config import PriorSpec, RunConfig
from .data_model import (
    FactorDesign,
    SearchWindows,
    TimeGrid,
    WaveformDataset,
    encode_design,
    read_long_csv,
    validate_dataset,
    write_long_csv,
)
from .errors import (
    DegenerateConditioningError,
    FactorizationError,
    ParameterError,
    SlamError,
    ValidationError,
)
from .estimator import SlamModel
from .inference import (
    AmplitudeSamples,
    PosteriorChain,
    attach_paths,
    curve_band,
    group_contrast,
    half_integral_peak,
    latency_summary,
    max_peak,
    mean_window_amplitude,
    pool_chains,
    rhat,
)
from .kernel import KernelHyper
from .mcem import (
    EmTrace,
    FitResult,
    LatentState,
    ProposalScales,
    estep_sample,
    mstep_optimize,
    run_mcem,
)
from .simulate import (
    GeneratorSpec,
    GroundTruth,
    generate,
    generate_model_based,
    generate_sine_cosine,
    run_replicates,
)

__version__ = "0.1.0"

__all__ = [
    "AmplitudeSamples",
    "DegenerateConditioningError",
    "EmTrace",
    "FactorDesign",
    "FactorizationError",
    "FitResult",
    "GeneratorSpec",
    "GroundTruth",
    "KernelHyper",
    "LatentState",
    "ParameterError",
    "PosteriorChain",
    "PriorSpec",
    "ProposalScales",
    "RunConfig",
    "SearchWindows",
    "SlamError",
    "SlamModel",
    "TimeGrid",
    "ValidationError",
    "WaveformDataset",
    "attach_paths",
    "curve_band",
    "encode_design",
    "estep_sample",
    "generate",
    "generate_model_based",
    "generate_sine_cosine",
    "group_contrast",
    "half_integral_peak",
    "latency_summary",
    "max_peak",
    "mean_window_amplitude",
    "mstep_optimize",
    "pool_chains",
    "read_long_csv",
    "rhat",
    "run_mcem",
    "run_replicates",
    "validate_dataset",
    "write_long_csv",
]
