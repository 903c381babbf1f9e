"""Exception types raised across the package."""


class MaskPointError(Exception):
    pass


class EmptyMask(MaskPointError, ValueError):
    pass


class OutOfBox(MaskPointError, ValueError):
    pass


class DegeneratePolygon(MaskPointError, ValueError):
    pass


class ShapeOutOfBounds(MaskPointError, ValueError):
    pass


class PlacementFailed(MaskPointError, RuntimeError):
    pass


class FormatError(MaskPointError, ValueError):
    def __init__(self, message, record_id=None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id}: {message}"
        super().__init__(message)


class ShapeError(MaskPointError, ValueError):
    pass


class DegenerateBox(MaskPointError, ValueError):
    pass


class TargetError(MaskPointError, ValueError):
    pass


class LabelError(MaskPointError, ValueError):
    pass


class CountError(MaskPointError, ValueError):
    pass


class MissingLabels(MaskPointError, ValueError):
    pass


class DivergedError(MaskPointError, FloatingPointError):
    """Training produced a non-finite loss; ``breakdown`` holds the offending values."""

    def __init__(self, breakdown):
        self.breakdown = breakdown
        super().__init__(f"non-finite loss: {breakdown}")
