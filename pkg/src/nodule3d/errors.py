"""Exception hierarchy shared by every stage of the pipeline."""


class Nodule3DError(Exception):
    """Base class for all errors raised by this package."""


class DataError(Nodule3DError):
    """Input data could not be interpreted."""


class MalformedHeader(DataError):
    pass


class UnsupportedField(DataError):
    pass


class SizeMismatch(DataError):
    pass


class DecodeError(DataError):
    pass


class MalformedRow(DataError):
    pass


class NoValidPlacement(DataError):
    pass


class MalformedNpy(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class DegenerateBatch(DataError, ValueError):
    pass


class ShapeIncompatible(DataError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CrcMismatch(DataError):
    pass


class VolumeTooSmall(DataError):
    pass


class ConfigError(DataError):
    pass
