"""Exception hierarchy shared by all mdmap modules."""


class MdmapError(Exception):
    """Base class for every error raised by mdmap."""


class GraphError(MdmapError, ValueError):
    """Invalid adjacency input or partition."""


class ConfigError(MdmapError, ValueError):
    """Malformed configuration or input files."""


class NumericalError(MdmapError, ArithmeticError):
    """A numerical routine could not produce a finite answer."""


class ConvergenceError(NumericalError):
    """Newton or quasi-Newton iterations did not converge.

    ``grad_norm`` holds the max-norm of the last gradient seen.
    """

    def __init__(self, message, grad_norm=float("nan"), iterations=0):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


class PipelineError(MdmapError):
    """A pipeline stage failed; ``stage`` names the failing step."""

    def __init__(self, stage, message, cause=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.cause = cause
