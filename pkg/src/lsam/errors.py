"""Exception types raised across the package."""


class LsamError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LsamError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(LsamError, FloatingPointError):
    """A NaN or Inf reached a computation that must only see finite values."""


class NonScalarLossError(LsamError, ValueError):
    pass


class DataFormatError(LsamError, ValueError):
    """Malformed input file; carries the 1-based row and column when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class SplitError(LsamError, ValueError):
    pass


class CorruptionError(LsamError, ValueError):
    pass


class MissingCellError(LsamError, ValueError):
    """A requested feature subset touches a cell that is not observed."""


class EnsembleSizeError(LsamError, ValueError):
    pass


class UntrainedMemberError(LsamError, KeyError):
    pass


class ImputationError(LsamError, ValueError):
    pass


class DivergenceError(LsamError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class ConfigError(LsamError, ValueError):
    pass


class ProbeError(LsamError, RuntimeError):
    pass
