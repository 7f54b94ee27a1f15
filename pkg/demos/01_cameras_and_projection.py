"""Rigid transforms and pinhole projection.

Builds the standard three-camera rig, projects world points through it,
and demonstrates the visibility contract: points behind a camera or
outside its image report visible=False, which downstream fusion turns
into exact zero feature vectors.
"""

import numpy as np

from p4d import Point3, RigidTransform, project_point
from p4d.simworld import SceneParameters, build_rig

# rigid transforms compose right-to-left: b is applied first
move = RigidTransform.from_translation(0, 0, 10)
turn = RigidTransform.from_yaw(np.radians(90))
combined = turn.compose(move)
print("origin through translate-then-yaw:", combined.apply(np.zeros(3)).round(6))
print("round trip error:",
      np.abs(combined.compose(combined.invert()).matrix - np.eye(4)).max())

rig = build_rig(SceneParameters())
print(f"\nrig: {len(rig)} cameras, {rig[0].image_width}x{rig[0].image_height} px")

targets = [
    Point3(0.0, 1.0, 20.0),    # straight ahead
    Point3(18.0, 1.0, 12.0),   # off to the right
    Point3(0.0, 1.0, -8.0),    # behind the rig
]
for p in targets:
    hits = [project_point(cam, p) for cam in rig]
    desc = ", ".join(
        f"cam{i}: ({q.u:6.1f},{q.v:6.1f})" if q.visible else f"cam{i}: out-of-view"
        for i, q in enumerate(hits)
    )
    print(f"point ({p.x:5.1f},{p.y:4.1f},{p.z:5.1f}) -> {desc}")

print("\nout-of-view points contribute zero feature vectors during fusion.")
