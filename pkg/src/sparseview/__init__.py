"""Sparse-view implicit 3D reconstruction of procedural figures.

Few calibrated perspective views of a synthetic figure go in; a spatially
consistent world-space triangle mesh comes out. The model is a pixel-aligned
occupancy network with attention-based multi-view fusion and a local 3D
context encoding, trained end to end on procedurally generated scenes.
"""

__version__ = "0.1.0"

from ._tuning import tune_allocator

tune_allocator()

from .cameras import Camera, CanonicalFrame

__all__ = ["Camera", "CanonicalFrame", "SparseViewReconstructor", "__version__"]


def __getattr__(name):
    # Deferred: the estimator pulls in the full pipeline stack.
    if name == "SparseViewReconstructor":
        from .estimator import SparseViewReconstructor

        return SparseViewReconstructor
    raise AttributeError(name)
