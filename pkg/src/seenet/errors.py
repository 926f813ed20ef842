"""Exception types raised across the package."""


class SeenetError(Exception):
    """Base class for all package-specific errors."""


class EmptyMask(SeenetError):
    """Mask has fewer than 3 foreground pixels."""


class DisconnectedMask(SeenetError):
    """Mask foreground splits into more than one connected component."""


class OutOfBounds(SeenetError):
    """A point lies outside the valid image grid."""


class DegenerateMap(SeenetError):
    """A heatmap channel is constant and has no decodable peak."""


class DegenerateBox(SeenetError):
    """A bounding box has zero or negative area."""


class DegenerateRecist(SeenetError):
    """A RECIST annotation is too small to seed a pseudo mask."""


class ShapeMismatch(SeenetError):
    """Two grids that must share a shape do not."""


class EmptyLabel(SeenetError):
    """A label contains no lesion pixels to sample from."""


class MissingTargets(SeenetError):
    """Loss evaluation was requested without matched targets."""


class AllUncertain(SeenetError):
    """Every pixel of a label is uncertain; the mask loss is undefined."""


class BadShape(SeenetError):
    """A network input does not match the expected shape."""


class NoCandidate(SeenetError):
    """The detector produced no usable candidate near the click."""


class EmptyDataset(SeenetError):
    """A training/evaluation dataset contains no samples."""


class MissingStage1(SeenetError):
    """Stage-2 training requires a stage-1 checkpoint that was not given."""


class SpecInfeasible(SeenetError):
    """Phantom generation could not satisfy the spec (e.g. lesion placement)."""


class MissingFile(SeenetError):
    """A referenced CSV or image file does not exist."""


class MalformedRow(SeenetError):
    """A CSV row could not be parsed; carries the 1-based row number."""

    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason
