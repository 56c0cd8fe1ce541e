"""Exception types shared across the package.

Each subclass maps onto one CLI exit code (see ``mtlat.cli``).
"""


class MtlatError(Exception):
    exit_code = 1


class ConfigError(MtlatError, ValueError):
    exit_code = 2


class DataError(MtlatError, ValueError):
    exit_code = 3


class ContractViolation(MtlatError, ValueError):
    exit_code = 4


class ShapeError(MtlatError, ValueError):
    """Raised by tensor primitives when operand shapes do not conform."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CheckpointError(DataError):
    pass


class CalibrationError(MtlatError, ValueError):
    pass
