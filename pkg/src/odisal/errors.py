"""Exception types shared across the toolkit."""


class OdisalError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(OdisalError, ValueError):
    """Tensor or raster shapes are inconsistent with the operation."""


class OutOfRange(OdisalError, ValueError):
    """A pixel coordinate lies outside the image."""


class FovTooSmall(OdisalError, ValueError):
    """The requested field of view cannot cover the sphere with six views."""


class AllHoles(OdisalError, ValueError):
    """Every pixel of the map is a hole; nothing to fill from."""


class AllZero(OdisalError, ValueError):
    """A map that must carry mass sums to zero."""


class EmptyFixations(OdisalError, ValueError):
    """A location-based metric was given no fixations."""


class ConstantInput(OdisalError, ValueError):
    """A correlation was requested on a zero-variance map."""


class EmptyDataset(OdisalError, ValueError):
    """Training was requested on an empty dataset."""


class TooFewSources(OdisalError, ValueError):
    """A source-level split needs at least two distinct source images."""


class Diverged(OdisalError, RuntimeError):
    """Training aborted because the test loss exploded past its best value."""


class CorruptFile(OdisalError, ValueError):
    """A binary raster or weights file failed validation."""


class ArchitectureMismatch(OdisalError, ValueError):
    """A weights file does not match the expected network architecture."""


class BadImage(OdisalError, ValueError):
    """An input image could not be decoded or has an unusable layout."""
