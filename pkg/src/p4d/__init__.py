"""Multi-modal 3D vehicle detection from temporal point clouds and camera
imagery, with a built-in synthetic driving-scene simulator.

Subsystem map:
- geometry: rigid transforms, pinhole cameras, 3D-to-2D projection
- simworld: seeded synthetic scenes, range scanner, camera renderer
- pillars: temporal accumulation, fixed-budget pillar grid, pseudo-image
- autodiff: tape-based reverse mode, optimizers, checkpoints, grad checks
- fusion: the detection network (towers, projection fusion, connections)
- anchors / training: anchor matching, loss, augmentation, train loop
- evaluation: rotated-box IoU and range-bucketed average precision
- ablation: comparative study harness over the fusion design space
- cli: `p4d` command-line entry point
"""

from .boxes import DetectionBox
from .geometry import CameraModel, PixelLocation, Point3, RigidTransform, project_point
from .pillars import GridConfig, PillarTensor, TimedPointCloud, accumulate, pillarize
from .simworld import Scene, SceneParameters, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "DetectionBox",
    "GridConfig",
    "PillarTensor",
    "PixelLocation",
    "Point3",
    "RigidTransform",
    "Scene",
    "SceneParameters",
    "TimedPointCloud",
    "accumulate",
    "generate_scene",
    "pillarize",
    "project_point",
    "__version__",
]
