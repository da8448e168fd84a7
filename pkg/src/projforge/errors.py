"""Exception hierarchy shared across the package.

The CLI maps :class:`InputError` to exit code 2 (usage or bad input) and
:class:`NumericalError` to exit code 3 (diverged or singular computation).
"""


class ProjforgeError(Exception):
    """Base class for all package-specific errors."""


class InputError(ProjforgeError):
    """Bad user input: missing files, malformed data, invalid arguments."""


class NumericalError(ProjforgeError):
    """Numerical failure: singular systems, non-finite losses, divergence."""


class ImageIOError(InputError):
    """Raster file could not be read or written."""


class MissingImageError(ImageIOError):
    pass


class MalformedImageError(ImageIOError):
    pass


class UnsupportedImageError(ImageIOError):
    pass


class ControlsParseError(InputError):
    """Control-point file has a bad line; message names file and line number."""


class DegenerateControlsError(NumericalError):
    """Control points coincide or are collinear; the TPS solve is ill-posed."""
