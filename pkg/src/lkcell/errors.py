"""Exception hierarchy shared by every lkcell module."""


class LKCellError(Exception):
    """Base class for all lkcell errors."""


class ShapeError(LKCellError, ValueError):
    """Tensor dimensions do not fit together."""


class ConfigError(LKCellError, ValueError):
    """Invalid layer, block, network or postprocess configuration."""


class ValidationError(LKCellError, ValueError):
    """Input data failed a value check (non-finite entries, bad ids, ...)."""


class DomainError(LKCellError, ValueError):
    """Function evaluated outside its mathematical domain."""


class WeightFileError(LKCellError):
    """Base class for weight-file problems."""


class FormatVersionError(WeightFileError):
    """Bad magic bytes or unsupported format version."""


class ConfigMismatchError(WeightFileError):
    """Weight file tensors do not match the requested network graph."""


class TruncatedFileError(WeightFileError):
    """Weight file ends before its directory says it should."""
