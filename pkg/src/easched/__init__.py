"""easched: energy-aware scheduling lab for small heterogeneous clusters.

A discrete-time cluster simulator, a policy-gradient scheduler trained on a
normalized energy-delay-product objective, shortest-job-first style baselines,
a brute-force optimum for tiny instances, and evaluation tooling, all behind
one CLI (``easched``).
"""

from .errors import (
    CheckpointFormatError,
    ConfigError,
    EaschedError,
    NumericError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "EaschedError",
    "UsageError",
    "ConfigError",
    "NumericError",
    "CheckpointFormatError",
    "__version__",
]
