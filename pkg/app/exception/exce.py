class PestError(Exception):
    def __init__(self, value):
        self.value = value

    def __str__(self):
        return f"{type(self).__name__}: {self.value}"


class VectorError(PestError):
    """Numeric failure inside the linear-algebra / training kernels."""


class ZeroNorm(VectorError):
    pass


class DimMismatch(VectorError):
    pass


class ShapeMismatch(VectorError):
    pass


class BadLabel(VectorError):
    pass


class NonPositiveTemperature(VectorError):
    pass


class StepOutOfRange(VectorError):
    pass


class MissingCentroid(VectorError):
    pass


class UsageError(PestError):
    """Bad input from the user: configs, specs, files."""


class ConfigError(UsageError):
    pass


class SpecError(UsageError):
    pass


class ResampleExhausted(UsageError):
    pass


class FormatVersionMismatch(UsageError):
    pass


class CorruptFile(UsageError):
    pass


class AdaptationError(PestError):
    def __init__(self, epoch: int, batch: int, cause: Exception):
        super().__init__(f"epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch
        self.cause = cause
