"""Exception types raised across the pipeline."""


class PDError(Exception):
    """Base class for all pipeline errors."""


# signal_io
class MissingFile(PDError, FileNotFoundError):
    pass


class MalformedRow(PDError, ValueError):
    def __init__(self, line, reason=""):
        self.line = line
        msg = f"malformed manifest row at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class DuplicateId(PDError, ValueError):
    def __init__(self, id_):
        self.id = id_
        super().__init__(f"duplicate measurement id {id_!r}")


class BadMagic(PDError, ValueError):
    pass


class TruncatedPayload(PDError, ValueError):
    pass


class NonFiniteSample(PDError, ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"non-finite sample at flat index {index}")


class DimMismatch(PDError, ValueError):
    pass


# preprocess / timefreq
class WindowTooLarge(PDError, ValueError):
    pass


class NoZeroCrossing(PDError, ValueError):
    pass


class LengthMismatch(PDError, ValueError):
    pass


# engine / model
class ShapeMismatch(PDError, ValueError):
    pass


class InputTooSmall(ShapeMismatch):
    pass


class PeakAxisMismatch(ShapeMismatch):
    pass


# training
class ClassTooSmall(PDError, ValueError):
    pass


class MissingCheckpoint(PDError, FileNotFoundError):
    pass


class NumericFailure(PDError, FloatingPointError):
    pass


# cli
class ConfigError(PDError, ValueError):
    pass
