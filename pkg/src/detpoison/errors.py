"""Exception taxonomy.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and OSError -> 3,
PlacementExhaustedError (when configured as fatal) -> 4.
"""


class DetPoisonError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DetPoisonError):
    """Invalid configuration value or flag combination."""


class InvalidAlphaError(ConfigError):
    """Blend ratio outside (0, 1]."""


class SizeTooSmallError(ConfigError):
    """Requested trigger size below the 4x4 synthesis floor."""


class EmptySelectionError(ConfigError):
    """Poison-subset selection produced no images."""


class DataError(DetPoisonError):
    """Malformed or internally inconsistent input data."""


class MalformedJsonError(DataError):
    """File is not valid JSON or not of the expected top-level shape."""


class MissingKeyError(DataError):
    """A required key is absent; the message names the entity and key."""


class DanglingReferenceError(DataError):
    """A record references an image or category id that does not exist."""


class DuplicateIdError(DataError):
    """Two images, categories, or annotations share an id."""


class InvalidBoxError(DataError):
    """A box fails the w > 0 / h > 0 / finite-coordinate invariants."""


class InvalidScoreError(DataError):
    """A detection score is non-finite or outside [0, 1]."""


class UnsupportedFormatError(DataError):
    """Image format or variant the codec does not handle."""


class CorruptHeaderError(DataError):
    """Image header could not be parsed."""


class TruncatedPixelDataError(DataError):
    """Image file ends before the pixel payload promised by its header."""


class OutOfBoundsError(DataError):
    """A trigger rectangle extends past the image edge."""


class ManifestMismatchError(DataError):
    """Manifest and detections/dataset reference incompatible image sets."""


class PlacementExhaustedError(DetPoisonError):
    """Scatter placement ran out of attempts before reaching the requested count.

    Carries the partially poisoned image and the regions placed so far, so the
    caller can apply a keep-partial policy.
    """

    def __init__(self, placed, requested, image=None, regions=None):
        super().__init__(
            f"placed {placed} of {requested} triggers before exhausting attempts"
        )
        self.placed = placed
        self.requested = requested
        self.image = image
        self.regions = regions if regions is not None else []
