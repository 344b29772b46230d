"""hiertax: hierarchical classification over label taxonomies.

Five head-wiring strategies over a shared dense-connectivity MLP backbone,
trained with masked weighted cross-entropy and evaluated with per-node
ROC-AUC.  Includes volumetric CT preprocessing, a deterministic synthetic
data generator, and a config-driven CLI (`hiertax`).
"""

__version__ = "0.1.0"

from ._kernels import backend_name

__all__ = ["backend_name", "__version__"]
