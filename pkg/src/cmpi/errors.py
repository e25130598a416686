"""Exception hierarchy shared by every layer of the runtime."""


class CmpiError(Exception):
    """Base class for all runtime errors."""


class DeviceError(CmpiError):
    pass


class ArenaError(CmpiError):
    pass


class RegionTooSmall(ArenaError):
    pass


class GeometryMismatch(ArenaError):
    pass


class NameExists(ArenaError):
    pass


class NotFound(ArenaError):
    pass


class MetadataFull(ArenaError):
    pass


class ObjectRegionFull(ArenaError):
    pass


class QueueError(CmpiError):
    pass


class BufferTooSmall(QueueError):
    """Raised by recv when the matched message does not fit.

    The message is consumed regardless; ``length`` carries its real size.
    """

    def __init__(self, length, capacity):
        super().__init__(f"message of {length} bytes does not fit buffer of {capacity}")
        self.length = length
        self.capacity = capacity


class CorruptMessage(QueueError):
    pass


class EpochError(CmpiError):
    pass


class LockError(CmpiError):
    pass


class SpinTimeout(CmpiError, TimeoutError):
    pass


class RuntimeStateError(CmpiError):
    pass


class RmaError(CmpiError):
    pass
