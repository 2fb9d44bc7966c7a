"""Exception types shared across the package."""


class WheatsplatError(Exception):
    """Base class for errors raised by this package."""


class FormatError(WheatsplatError):
    """A file does not conform to its expected layout."""


class EmptySceneError(FormatError):
    """A scene file contains no Gaussians."""


class CalibrationError(WheatsplatError):
    """A camera fails validation (non-orthonormal rotation, bad intrinsics)."""


class AlignmentError(WheatsplatError):
    """Registration cannot proceed (degenerate correspondences)."""


class EvaluationError(WheatsplatError):
    """Cross-modality evaluation cannot proceed (e.g. empty reference)."""


class InputError(WheatsplatError):
    """Inconsistent inputs (e.g. instance map referencing missing Gaussians)."""


class Unmeasurable(WheatsplatError):
    """An instance cloud cannot be measured; carries the reason string."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
