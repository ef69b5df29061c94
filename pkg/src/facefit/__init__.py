"""Analysis-by-synthesis face reconstruction on toy morphable models.

Submodules are imported on demand; `facefit.cli` relies on this to fix the
rasterizer thread count before numba starts.
"""

__version__ = "0.1.0"
