"""Exception hierarchy shared by all repsim modules."""


class RepsimError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RepsimError):
    """An input violates a documented invariant (NaN values, bad shapes, ...)."""


class FormatError(RepsimError):
    """An on-disk artifact does not match its binary or TSV layout."""


class CapacityError(RepsimError):
    """Not enough items to satisfy a sampling request (slides, pixels, tissue)."""


class AlignmentError(RepsimError):
    """Two inputs that must share length and item ordering do not."""


class CompletenessError(RepsimError):
    """A (model, batch) grid has a missing cell."""


class DegenerateDataError(RepsimError):
    """Data admits no answer: all-tied ranks, zero variance, single-bin histograms."""


class DistanceError(RepsimError):
    """A pairwise distance is undefined for the given rows."""
