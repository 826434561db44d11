"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class AxisError(ShapeError):
    """A reduction axis is out of range for the operand."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(ValueError):
    """Input data cannot be processed, e.g. a zero-variance brain region."""


class ParseError(ValueError):
    """A volume, manifest, checkpoint or config file is malformed."""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: {field}: {message}")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""


class CapacityError(MemoryError):
    """A full-volume forward pass would exceed the configured memory budget."""
