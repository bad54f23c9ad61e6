class SsmFusimError(Exception):
    """Base class for all errors raised by ssmfusim."""


class GraphError(SsmFusimError):
    """Malformed workload graph (cycle, shape mismatch, unknown tensor)."""


class ConfigError(SsmFusimError):
    """Invalid model, accelerator or scheme configuration."""


class InfeasibleError(SsmFusimError):
    """A hardware point cannot execute the requested schedule."""
