"""Continuous weight manifolds for residual networks.

Thin wrapper over the C++ core. The extension lives inside the package in
wheel builds and on the interpreter path in plain in-tree builds.
"""

try:
    from ._metamorph import *  # noqa: F401,F403
    from . import _metamorph as _impl
except ImportError:
    from _metamorph import *  # noqa: F401,F403
    import _metamorph as _impl

__all__ = [name for name in dir(_impl) if not name.startswith("_")]
__version__ = "0.1.0"
