"""Error taxonomy shared across the package.

Exit codes (used by the CLI): 2 config, 3 data, 4 divergence, 5 numerical.
"""


class GGError(Exception):
    exit_code = 1


class ShapeError(GGError):
    """Dimension/shape mismatch."""
    exit_code = 2


class ConfigError(GGError):
    exit_code = 2


class DataError(GGError):
    exit_code = 3


class CheckpointError(DataError):
    """Corrupt or truncated checkpoint file."""


class DivergenceError(GGError):
    exit_code = 4


class NumericalError(GGError):
    exit_code = 5


class CalibrationError(NumericalError):
    """Degenerate probe during logit-scale calibration."""
