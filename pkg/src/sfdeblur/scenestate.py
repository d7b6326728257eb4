"""Piecewise-rigid scene flow state: a plane per superpixel, a rigid motion
per object, and the superpixel-to-object assignment."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import Plane, RigidMotion


@dataclass
class SceneFlowState:
    planes: list
    objects: np.ndarray
    motions: list

    def __post_init__(self):
        self.objects = np.asarray(self.objects, dtype=np.int32)
        if len(self.planes) != len(self.objects):
            raise ValueError("planes/objects length mismatch")
        if len(self.motions) == 0:
            raise ValueError("need at least one motion")
        if self.objects.min(initial=0) < 0 or (
            len(self.objects) and self.objects.max() >= len(self.motions)
        ):
            raise ValueError("object ids out of range")

    @property
    def count(self):
        return len(self.planes)

    def motion_of(self, i):
        return self.motions[self.objects[i]]

    def copy(self):
        return SceneFlowState(
            list(self.planes), self.objects.copy(), list(self.motions)
        )

    def to_dict(self):
        return {
            "planes": [p.n.tolist() for p in self.planes],
            "objects": self.objects.tolist(),
            "motions": [
                {"rotation": m.rotation.tolist(), "translation": m.translation.tolist()}
                for m in self.motions
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            planes = [Plane(np.asarray(n, dtype=np.float64)) for n in d["planes"]]
            motions = [
                RigidMotion(np.asarray(m["rotation"]), np.asarray(m["translation"]))
                for m in d["motions"]
            ]
            objects = np.asarray(d["objects"], dtype=np.int32)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed scene flow state: {e}") from e
        return cls(planes, objects, motions)
