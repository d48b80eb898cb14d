"""Exception hierarchy.

Each family maps onto a CLI exit code: input problems exit 2, numerical
failures exit 3, bad configuration exits 4.
"""


class HnsegError(Exception):
    exit_code = 1


class InputError(HnsegError):
    exit_code = 2


class NumericalError(HnsegError):
    exit_code = 3


class ConfigError(HnsegError, ValueError):
    exit_code = 4


# nifti_io
class NiftiError(InputError):
    pass


class BadMagic(NiftiError):
    pass


class BadHeaderSize(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class DegenerateAffine(NiftiError):
    pass


class MultiChannelUnsupported(InputError):
    pass


# volume geometry
class MissingColumn(InputError):
    pass


class NonNumericCoordinate(InputError):
    pass


class DuplicatePatient(InputError):
    pass


class NoOverlap(InputError):
    pass


class NonFiniteInput(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class GridMismatch(InputError):
    pass


# augment
class AngleOutOfRange(ConfigError):
    pass


class GridTooSmall(InputError):
    pass


class NegativeInput(InputError):
    pass


# autodiff / model / metrics
class ShapeMismatch(HnsegError, ValueError):
    pass


class NonScalarLoss(HnsegError, ValueError):
    pass


class EmptyInput(InputError):
    pass


# pipeline / cli
class MissingFile(InputError):
    pass


class BboxWithoutFiles(MissingFile):
    pass


class SingleCenter(InputError):
    pass


class UnpairedPatient(InputError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
