"""Exception hierarchy.

Every error raised by this package derives from :class:`MultiposeError`,
so callers (and the CLI exit-code mapping) can distinguish bad input data
from genuine bugs.
"""


class MultiposeError(Exception):
    """Base class for all domain errors raised by multipose."""


# geometry -----------------------------------------------------------------

class SchemaMismatch(MultiposeError):
    """Two landmark sets use different landmark schemas."""


class DegenerateConfiguration(MultiposeError):
    """Landmark configuration admits no unique similarity transform."""


class MissingAnchors(MultiposeError):
    """Landmark schema does not define the eye anchor points."""


# features ------------------------------------------------------------------

class OutOfBounds(MultiposeError):
    """Pixel coordinate too close to the image border."""


class EmptyKeypoints(MultiposeError):
    """Extractor configuration contains no key points."""


class FormatError(MultiposeError):
    """Binary container is malformed (bad magic, version, or truncation)."""


class DimMismatch(MultiposeError):
    """Feature vectors do not share a common dimension."""


class DuplicateId(MultiposeError):
    """The same record id appears more than once."""


class EmptyList(MultiposeError):
    """An operation requiring at least one element got none."""


class PipelineMismatch(MultiposeError):
    """Feature vectors come from different representation pipelines."""


# adaptation ----------------------------------------------------------------

class TooFewSamples(MultiposeError):
    """Not enough samples to fit a model."""


class ZeroVariance(MultiposeError):
    """Sample covariance is identically zero."""


# matching ------------------------------------------------------------------

class ZeroVector(MultiposeError):
    """Cosine similarity is undefined for a zero-norm vector."""


class NoSharedPipelines(MultiposeError):
    """Two representation sets have no pipeline in common."""


class EmptyTemplate(MultiposeError):
    """A template contains no image representations."""


class NoComparablePairs(MultiposeError):
    """No cross-template image pair shares a pipeline."""


# protocol ------------------------------------------------------------------

class ParseError(MultiposeError):
    """A manifest or split file row could not be parsed."""


class DuplicateImageId(MultiposeError):
    """image_id appears more than once in a manifest."""


class InconsistentSubject(MultiposeError):
    """One template groups records of different subjects."""


class MissingRepresentation(MultiposeError):
    """A template member has no representation set."""


class MissingPairs(MultiposeError):
    """Split declares no verification pairs."""


# metrics ---------------------------------------------------------------------

class EmptyScores(MultiposeError):
    """A score list required to be non-empty is empty."""


class UnmatedProbe(MultiposeError):
    """A probe does not have exactly one mated gallery template."""
