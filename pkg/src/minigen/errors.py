"""Exception types shared across the toolkit."""


class MinigenError(Exception):
    """Base class; ``code`` is the short machine-readable tag used by the CLI."""

    code = "error"


class PreconditionError(MinigenError, ValueError):
    code = "precondition"


class DegenerateInputError(MinigenError, ValueError):
    code = "degenerate_input"


class NonFiniteError(MinigenError, FloatingPointError):
    """Raised in anomaly mode when an op produces NaN/Inf."""

    code = "non_finite"

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by {op} ({where})")
        self.op = op
        self.where = where


class DivergenceError(MinigenError, RuntimeError):
    code = "divergence"

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ConfigError(MinigenError, ValueError):
    code = "config"
