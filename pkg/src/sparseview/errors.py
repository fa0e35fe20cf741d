"""Exception types raised across the package."""


class SparseViewError(Exception):
    """Base class for all package errors."""


class PointBehindCamera(SparseViewError):
    """A 3D point projects with non-positive camera depth."""


class EmptyCrop(SparseViewError):
    """A crop window lies fully outside the source image."""


class DegenerateGeometry(SparseViewError):
    """A geometric solve is rank-deficient (e.g. collinear triangulation rays)."""


class EmptyMesh(SparseViewError):
    """An operation requires a non-empty mesh."""


class EmptyMask(SparseViewError):
    """A mask has no foreground pixels."""


class ShapeMismatch(SparseViewError):
    """Tensor or array shapes are incompatible for the requested operation."""


class NonFiniteValue(SparseViewError):
    """A NaN or Inf appeared where only finite values are allowed."""
