"""Exception types shared across the package."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(PipelineError):
    """Array shapes of related grids or point lists do not agree."""


class DegenerateInput(PipelineError):
    """Point configuration too weak to determine a transform (collinear,
    coincident, or fewer than three positively weighted correspondences)."""


class ZeroEmbedding(PipelineError):
    """An embedding vector has (near-)zero norm and cannot be normalized."""


class FormatError(PipelineError):
    """A binary or text file does not conform to its declared format."""


class MissingEdge(PipelineError):
    """A requested edge decode is not available from the backend."""


class InsufficientPoints(PipelineError):
    """Too few usable points for an estimation routine."""


class NoPositiveDepth(PipelineError):
    """All candidate points lie at or behind the camera plane."""


class InsufficientPoses(PipelineError):
    """Too few registered poses for a metric to be defined."""


class EmptyCloud(PipelineError):
    """A point cloud argument contains no points."""
