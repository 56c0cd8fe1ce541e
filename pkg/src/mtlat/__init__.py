"""NumPy toolkit for targeted-labeling adversarial training with Mixup and robustness benchmarking."""

from .errors import CheckpointError, ConfigError, ContractViolation, DataError, MtlatError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractViolation", "DataError", "MtlatError", "ShapeError",
    "__version__",
]
