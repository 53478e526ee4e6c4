"""Simulation and exact analysis of marginal join-the-shortest-queue load balancing."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.1.0"

from .core import (  # noqa: E402
    GapVector,
    InfeasibleParameters,
    LabeledState,
    Policy,
    RankedState,
    ScaledVector,
    SystemParams,
    diffusion_scale,
    gaps,
    rank,
    ranked_from_gaps,
    tail_mass,
    unscale,
)

__all__ = [
    "__version__",
    "GapVector",
    "InfeasibleParameters",
    "LabeledState",
    "Policy",
    "RankedState",
    "ScaledVector",
    "SystemParams",
    "diffusion_scale",
    "gaps",
    "rank",
    "ranked_from_gaps",
    "tail_mass",
    "unscale",
]
