class ConfigurationError(ValueError):
    """Invalid parameters or inputs (empty sets, out-of-range settings)."""


class CutLocusError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class PreconditionError(ValueError):
    """Input violates a stated precondition of the operation."""


class DegenerateGeometryError(RuntimeError):
    """Normal equations stay singular after damping escalation, or no point is visible."""
