"""Unit tests for superpixel segmentation invariants."""

import numpy as np
import pytest

from sfdeblur.errors import DataError
from sfdeblur.segmentation import Superpixelization, from_labels, segment
from sfdeblur.window import DisparityMap


def _toy_inputs(h=48, w=64, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(h, w, 3))
    gy, gx = np.mgrid[0:h, 0:w]
    disparity = DisparityMap(4.0 + 0.05 * gx + 0.02 * gy)
    return img, disparity


def _check_partition(seg, h, w):
    labels = seg.labels
    assert labels.shape == (h, w)
    assert labels.min() >= 0
    assert labels.max() == seg.count - 1
    assert set(np.unique(labels)) == set(range(seg.count))


def _four_connected(labels, i):
    from scipy import ndimage

    mask = labels == i
    n_comp, _ = ndimage.label(mask, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]]
    )), None
    lab, count = ndimage.label(
        mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    )
    return count == 1


class TestSegment:
    def test_partition_and_connectivity(self):
        img, disparity = _toy_inputs()
        seg = segment(img, disparity, 40)
        _check_partition(seg, 48, 64)
        for i in range(seg.count):
            assert _four_connected(seg.labels, i)

    def test_boundary_sets_symmetric_and_nonempty(self):
        img, disparity = _toy_inputs(seed=3)
        seg = segment(img, disparity, 30)
        for (i, j) in seg.boundaries:
            assert i < j
            assert len(seg.boundaries[(i, j)]) >= 1
            assert j in seg.adjacency[i]
            assert i in seg.adjacency[j]

    def test_boundaries_cover_label_transitions(self):
        img, disparity = _toy_inputs(seed=5)
        seg = segment(img, disparity, 25)
        labels = seg.labels
        h, w = labels.shape
        expected = set()
        for y in range(h):
            for x in range(w):
                if x + 1 < w and labels[y, x] != labels[y, x + 1]:
                    expected.add((y, x))
                    expected.add((y, x + 1))
                if y + 1 < h and labels[y, x] != labels[y + 1, x]:
                    expected.add((y, x))
                    expected.add((y + 1, x))
        got = set()
        for pts in seg.boundaries.values():
            for (y, x) in np.asarray(pts).reshape(-1, 2):
                got.add((int(y), int(x)))
        assert got == expected

    def test_target_count_respected_roughly(self):
        img, disparity = _toy_inputs(seed=7)
        seg = segment(img, disparity, 40)
        assert 10 <= seg.count <= 80

    def test_deterministic(self):
        img, disparity = _toy_inputs(seed=11)
        a = segment(img, disparity, 35)
        b = segment(img, disparity, 35)
        assert np.array_equal(a.labels, b.labels)


class TestFromLabels:
    def test_round_trip(self):
        img, disparity = _toy_inputs(seed=2)
        seg = segment(img, disparity, 20)
        rebuilt = from_labels(seg.labels)
        assert np.array_equal(rebuilt.labels, seg.labels)
        assert rebuilt.count == seg.count
        assert set(rebuilt.boundaries) == set(seg.boundaries)

    def test_rejects_noncontiguous_ids(self):
        labels = np.zeros((6, 6), dtype=np.int32)
        labels[:, 3:] = 2
        with pytest.raises(DataError):
            from_labels(labels)

    def test_rejects_disconnected_region_when_checked(self):
        labels = np.zeros((6, 6), dtype=np.int32)
        labels[:, 2] = 1
        labels[0, 0] = 1
        with pytest.raises(DataError):
            from_labels(labels, check_connectivity=True)
