"""Exception hierarchy shared by every subsystem.

CLI exit codes are attached to the three families that the command line
distinguishes (config, data, checkpoint); everything else is a plain
``ViewDiffError`` and maps to a generic failure.
"""


class ViewDiffError(Exception):
    exit_code = 1


class ShapeMismatch(ViewDiffError, ValueError):
    pass


class EmptyAxis(ViewDiffError, ValueError):
    pass


class DivisibilityError(ViewDiffError, ValueError):
    pass


class NonScalarLoss(ViewDiffError, ValueError):
    pass


class BadRange(ViewDiffError, ValueError):
    pass


class TOutOfRange(ViewDiffError, IndexError):
    pass


class BadSteps(ViewDiffError, ValueError):
    pass


class EmptyViewList(ViewDiffError, ValueError):
    pass


class TooFewSamples(ViewDiffError, ValueError):
    pass


class ConfigError(ViewDiffError):
    exit_code = 2


class BadConfig(ConfigError):
    pass


class DataError(ViewDiffError):
    exit_code = 3


class MissingDataset(DataError):
    pass


class IoError(DataError, OSError):
    pass


class CheckpointError(ViewDiffError):
    exit_code = 4


class CheckpointMismatch(CheckpointError):
    pass
