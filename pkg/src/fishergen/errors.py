"""Exception types shared across the package."""


class NonFiniteError(RuntimeError):
    """A NaN or Inf appeared where only finite values are valid (usually a
    sign of divergent training)."""


class CgBreakdownError(RuntimeError):
    """Conjugate gradients hit p^T A p <= 0, i.e. the operator is not SPD."""


class IdxFormatError(ValueError):
    """An IDX file has a bad magic number, truncated payload, or mismatched
    dimensions."""


class ConfigError(ValueError):
    """A run configuration value or config file line is invalid."""
