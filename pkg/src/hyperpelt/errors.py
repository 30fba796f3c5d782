"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DeterminismError(RuntimeError):
    """Two evaluations that should agree bit-for-bit did not."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared layout."""


class VersionError(FormatError):
    """A file was written with an unsupported format version."""


class TemplateError(ValueError):
    """A task template could not be rendered."""


class UnknownNameError(KeyError):
    """Lookup of a task, method, parameter or index failed."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown name"
