"""Exception types shared across the package.

Everything raised on purpose derives from :class:`GoptError`, so callers
(including the CLI) can distinguish expected failures from bugs. Most types
also subclass a fitting builtin so generic handlers keep working.
"""


class GoptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GoptError, ValueError):
    """Array shapes or sizes are inconsistent with an operation's contract."""


class NumericError(GoptError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ContractError(GoptError, ValueError):
    """An API precondition was violated (non-scalar loss, empty batch, ...)."""


class InventoryError(GoptError, ValueError):
    """A phone or acoustic-state index falls outside the inventory."""


class SegmentError(GoptError, ValueError):
    """A frame segment is empty or reversed (end before start)."""


class BoundsError(GoptError, IndexError):
    """A frame index falls outside the posteriorgram."""


class AlignmentError(GoptError, ValueError):
    """Alignment segments overlap, run backwards, or break word order."""


class CapacityError(GoptError, ValueError):
    """An utterance exceeds the model's maximum sequence length."""


class LabelError(GoptError, ValueError):
    """Supervision targets are missing or inconsistent with the utterance."""


class DataFormatError(GoptError, ValueError):
    """A data file is truncated, ill-formed, or fails validation."""


class DegenerateDataError(GoptError, ValueError):
    """A statistic is undefined for the given data (e.g. constant inputs)."""
