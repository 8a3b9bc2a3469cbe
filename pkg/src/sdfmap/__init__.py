"""Incremental online SDF mapping.

Fuses posed point clouds into a coarse voxel ESDF, complements it with fine
raycast distance samples near surfaces, and trains a continuous
sinusoidal-activation network on both, frame by frame.
"""

__version__ = "0.1.0"

from .geometry import Frame, Pose, Scene, analytic_grad, analytic_sdf, load_scene, save_scene
from .pipeline import PipelineConfig, RunResult, run, simulate
from .samples import SdfSample, SdfSamples

__all__ = [
    "Frame",
    "Pose",
    "Scene",
    "analytic_grad",
    "analytic_sdf",
    "load_scene",
    "save_scene",
    "PipelineConfig",
    "RunResult",
    "run",
    "simulate",
    "SdfSample",
    "SdfSamples",
    "__version__",
]
