"""splatlab: a CPU-only differentiable dynamic Gaussian splatting lab.

Canonical 3D gaussians are deformed per timestep by a two-stage
denoising deformation network (temporal aggregation in stage one,
KNN spatial aggregation on the denoised coordinates in stage two) and
rendered by a depth-sorted differentiable rasterizer, all on top of a
small reverse-mode autodiff core.
"""

from . import (cli, config, deformnet, diffcore, encoders, gaussians,
               gradcheck, images, rasterizer, report, synthdata, training)

__all__ = [
    "cli", "config", "deformnet", "diffcore", "encoders", "gaussians",
    "gradcheck", "images", "rasterizer", "report", "synthdata", "training",
]

__version__ = "0.1.0"
