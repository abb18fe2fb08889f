"""Exception hierarchy shared by every cellnca module."""


class NcaError(Exception):
    """Base class for all errors raised by cellnca."""


class ShapeError(NcaError, ValueError):
    """Array dimensions disagree with what an operation expects."""


class TapeError(NcaError, RuntimeError):
    """Misuse of the differentiation tape (e.g. backward before forward)."""


class TrainingError(NcaError, RuntimeError):
    """Training diverged or could not proceed."""


class DataError(NcaError):
    """A dataset input could not be read or is malformed."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class UnmappedLabelError(DataError, KeyError):
    def __init__(self, domain, label):
        super().__init__(f"label {label!r} of domain {domain!r} is missing from the harmonization map")
        self.domain = domain
        self.label = label

    def __str__(self):
        return self.args[0]


class ConfigError(NcaError, ValueError):
    """Bad configuration file or value; carries the offending key and line."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


class ExportError(NcaError, OSError):
    """Explanation artifacts could not be written."""


class CheckpointError(NcaError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
