"""Multiple-model adaptive particle filtering.

K bootstrap particle filters, one per candidate model, share a budget of N
particles. Their evidence estimates give model posteriors, which drive
global-ESS resampling and particle reallocation between filters.
"""

from mapf import mobility, scenarios  # noqa: F401  (registers model families)
from mapf.engine import MapfConfig, RunTrace, StepReport, init_state, run_mapf, step
from mapf.kernels import available_backends, use_backend
from mapf.models import ModelBank, ModelSpec, TrueModelSchedule, build_model, simulate_truth

__version__ = "0.1.0"

__all__ = [
    "MapfConfig",
    "ModelBank",
    "ModelSpec",
    "RunTrace",
    "StepReport",
    "TrueModelSchedule",
    "available_backends",
    "build_model",
    "init_state",
    "run_mapf",
    "simulate_truth",
    "step",
    "use_backend",
]
