"""Dense shape correspondence through a learned, volume-aware template deformation."""

__version__ = "0.1.0"

from .config import RunConfig, apply_ablation  # noqa: E402,F401
from .geometry import TriangleMesh, load_mesh, save_mesh  # noqa: E402,F401
