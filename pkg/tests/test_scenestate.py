"""Scene flow state container: validation, lookup, serialization round-trip."""

import numpy as np
import pytest

from sfdeblur.errors import DataError
from sfdeblur.geometry import Plane, RigidMotion
from sfdeblur.scenestate import SceneFlowState


def _state():
    planes = [Plane(np.array([0.01, -0.02, 0.1])), Plane(np.array([0.0, 0.0, 0.2]))]
    rot = RigidMotion.identity().rotation
    motions = [RigidMotion(rot, np.array([0.1, 0.0, 0.0])), RigidMotion.identity()]
    return SceneFlowState(planes, np.array([1, 0]), motions)


class TestValidation:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SceneFlowState([Plane(np.array([0.0, 0.0, 0.1]))], np.array([0, 0]),
                           [RigidMotion.identity()])

    def test_empty_motion_table_rejected(self):
        with pytest.raises(ValueError):
            SceneFlowState([Plane(np.array([0.0, 0.0, 0.1]))], np.array([0]), [])

    def test_object_ids_must_reference_motions(self):
        planes = [Plane(np.array([0.0, 0.0, 0.1]))]
        with pytest.raises(ValueError):
            SceneFlowState(planes, np.array([1]), [RigidMotion.identity()])
        with pytest.raises(ValueError):
            SceneFlowState(planes, np.array([-1]), [RigidMotion.identity()])


class TestAccess:
    def test_count_and_motion_lookup(self):
        s = _state()
        assert s.count == 2
        assert s.motion_of(0) is s.motions[1]
        assert s.motion_of(1) is s.motions[0]

    def test_copy_is_independent(self):
        s = _state()
        dup = s.copy()
        dup.objects[0] = 0
        dup.planes[0] = Plane(np.array([0.0, 0.0, 0.5]))
        assert s.objects[0] == 1
        assert s.planes[0].n[2] == pytest.approx(0.1)


class TestSerialization:
    def test_round_trip_exact(self):
        s = _state()
        d = s.to_dict()
        back = SceneFlowState.from_dict(d)
        assert np.array_equal(back.objects, s.objects)
        for a, b in zip(back.planes, s.planes):
            assert np.array_equal(a.n, b.n)
        for a, b in zip(back.motions, s.motions):
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.translation, b.translation)

    def test_dict_is_json_ready(self):
        import json

        s = _state()
        text = json.dumps(s.to_dict())
        back = SceneFlowState.from_dict(json.loads(text))
        assert np.array_equal(back.objects, s.objects)

    def test_malformed_dict_raises_data_error(self):
        with pytest.raises(DataError):
            SceneFlowState.from_dict({"planes": [[0.0, 0.0, 0.1]]})
        with pytest.raises(DataError):
            SceneFlowState.from_dict(
                {"planes": [[0.0, 0.0, 0.1]], "objects": [0],
                 "motions": [{"rotation": "junk", "translation": [0, 0, 0]}]}
            )
