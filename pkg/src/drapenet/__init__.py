"""Drape parametric garments on parametric bodies with graph convolutional regressors."""

__version__ = "0.1.0"

from .mesh import TriangleMesh, SparseMatrix, load_obj, save_obj

__all__ = ["TriangleMesh", "SparseMatrix", "load_obj", "save_obj", "__version__"]
