"""Shared exception types; the CLI maps them onto exit codes."""


class ModelDefinitionError(ValueError):
    """Invalid model data: dimension mismatch or malformed terms."""


class InputError(ValueError):
    """Invalid operation input (degenerate region, bad sizes, short series)."""


class ManifestError(InputError):
    """Malformed or incomplete run manifest."""


class NumericalStateError(RuntimeError):
    """Non-finite state or a failed numerical contract during a run."""


class NewtonConvergenceError(NumericalStateError):
    """Newton iteration failed to meet its residual contract."""
