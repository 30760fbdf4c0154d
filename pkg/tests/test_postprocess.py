import numpy as np
import pytest

from lkcell.errors import ConfigError, ShapeError, ValidationError
from lkcell.network import SegmentationOutput
from lkcell.postprocess import (InstanceSegmentation, PostprocessParams, boundary_strength, compute_energy,
                                from_masks, instance_hv_maps, instance_segment, majority_vote, rasterize,
                                sobel_gradient, watershed)

from builders import random_output, touching_labels, two_disc_labels
from oracles import bfs_components, brute_force_assignment, disc

KX = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]


def sobel_oracle(grid):
    """Per-pixel 3x3 correlation with clamped (replicated) indices."""
    h, w = grid.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            sx = sy = 0.0
            for i in range(3):
                for j in range(3):
                    v = grid[min(max(r + i - 1, 0), h - 1), min(max(c + j - 1, 0), w - 1)]
                    sx += KX[i][j] * v
                    sy += KX[j][i] * v
            gx[r, c], gy[r, c] = sx, sy
    return gx, gy


def scene(label_map, classes, num_classes=6):
    return rasterize(InstanceSegmentation(label_map, classes), num_classes)


# sobel

def test_sobel_constant_map():
    gx, gy = sobel_gradient(np.full((5, 6), 3.0))
    assert not gx.any() and not gy.any()


def test_sobel_ramp():
    ramp = np.tile(np.arange(8.0), (6, 1))
    gx, gy = sobel_gradient(ramp, normalize=False)
    np.testing.assert_array_equal(gy, 0)
    np.testing.assert_array_equal(gx[:, 1:-1], 8.0)


def test_sobel_matches_oracle_exactly(gen):
    grid = gen.integers(-50, 50, (9, 11)).astype(float)
    gx, gy = sobel_gradient(grid, normalize=False)
    ox, oy = sobel_oracle(grid)
    np.testing.assert_array_equal(gx, ox)
    np.testing.assert_array_equal(gy, oy)


def test_sobel_float_oracle(gen):
    grid = gen.standard_normal((7, 7))
    gx, gy = sobel_gradient(grid)
    ox, oy = sobel_oracle(grid)
    np.testing.assert_allclose(gx, ox / np.abs(ox).max(), atol=1e-12)
    np.testing.assert_allclose(gy, oy / np.abs(oy).max(), atol=1e-12)
    assert np.abs(gx).max() == pytest.approx(1.0)


def test_sobel_too_small():
    with pytest.raises(ShapeError):
        sobel_gradient(np.zeros((2, 5)))


# energy and markers

def test_empty_foreground():
    out = SegmentationOutput(np.stack([np.ones((32, 32)), np.zeros((32, 32))])[None],
                             np.zeros((1, 2, 32, 32)), np.ones((1, 6, 32, 32)) / 6)
    energy, markers, fg = compute_energy(out.np_map[0, 1], out.hv_map[0])
    assert not fg.any() and not markers.any() and not energy.any()
    assert instance_segment(out).num_instances == 0


def test_single_disc_one_marker():
    lab = np.zeros((32, 32), dtype=np.int64)
    lab[disc(lab.shape, (15, 16), 8)] = 1
    out = scene(lab, {1: 2})
    _, markers, fg = compute_energy(out.np_map[0, 1], out.hv_map[0])
    assert len(bfs_components(markers)) == 1
    np.testing.assert_array_equal(fg, lab > 0)


def test_two_separated_discs_two_markers():
    lab = two_disc_labels()
    out = scene(lab, {1: 1, 2: 3})
    _, markers, _ = compute_energy(out.np_map[0, 1], out.hv_map[0])
    comps = bfs_components(markers)
    assert len(comps) == 2
    assert {lab[min(comp)] for comp in comps} == {1, 2}


def test_small_markers_dropped():
    lab = np.zeros((16, 16), dtype=np.int64)
    lab[disc(lab.shape, (8, 8), 1)] = 1  # 5 pixels
    out = scene(lab, {1: 1})
    _, markers, fg = compute_energy(out.np_map[0, 1], out.hv_map[0])
    assert not markers.any() and fg.sum() == 5


def test_marker_set_monotone_in_threshold(gen):
    lab = two_disc_labels()
    out = scene(lab, {1: 1, 2: 3})
    hv = out.hv_map[0] + 0.05 * gen.standard_normal(out.hv_map[0].shape)
    prev = None
    for t in np.linspace(0.05, 0.95, 12):
        _, markers, _ = compute_energy(out.np_map[0, 1], hv, PostprocessParams(0.5, t, 1))
        if prev is not None:
            assert not (prev & ~markers).any()
        prev = markers


def test_params_validation():
    with pytest.raises(ConfigError):
        PostprocessParams(np_threshold=1.0)
    with pytest.raises(ConfigError):
        PostprocessParams(marker_threshold=0.0)
    with pytest.raises(ConfigError):
        PostprocessParams(min_instance_size=0)


def test_energy_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_energy(np.zeros((8, 8)), np.zeros((2, 8, 9)))


# watershed

def test_single_marker_covers_foreground():
    fg = disc((20, 20), (10, 10), 6)
    markers = np.zeros_like(fg)
    markers[10, 10] = True
    labels = watershed(markers, -fg.astype(float), fg)
    np.testing.assert_array_equal(labels, fg.astype(int))


def test_markers_equal_foreground(gen):
    fg = np.zeros((20, 20), dtype=bool)
    fg[2:6, 2:6] = fg[10:18, 3:5] = fg[12:14, 10:19] = True
    labels = watershed(fg, gen.uniform(-1, 0, fg.shape) * fg, fg)
    comps = bfs_components(fg)
    assert labels.max() == len(comps)
    for comp in comps:
        assert len({labels[p] for p in comp}) == 1


def test_no_marker_fallback():
    fg = np.zeros((12, 12), dtype=bool)
    fg[1:4, 1:4] = fg[6:10, 6:11] = True
    labels = watershed(np.zeros_like(fg), -fg.astype(float), fg)
    assert labels.max() == 2
    assert labels[2, 2] == 1 and labels[7, 7] == 2


def test_markers_outside_foreground_rejected():
    fg = np.zeros((5, 5), dtype=bool)
    markers = np.zeros_like(fg)
    markers[0, 0] = True
    with pytest.raises(ValidationError):
        watershed(markers, np.zeros((5, 5)), fg)


def test_touching_nuclei_split_matches_oracle():
    lab = touching_labels()
    out = scene(lab, {1: 1, 2: 4})
    energy, markers, fg = compute_energy(out.np_map[0, 1], out.hv_map[0])
    comps = bfs_components(markers)
    assert len(comps) == 2
    labels = watershed(markers, energy, fg)
    assign = brute_force_assignment(comps, energy, fg)
    assert labels.max() == 2
    mapping = {k: labels[min(comp)] for k, comp in enumerate(comps)}
    decided = assign >= 0
    assert decided.sum() > 0.9 * fg.sum()
    expected = np.vectorize(lambda a: mapping.get(a, 0))(assign)
    np.testing.assert_array_equal(labels[decided], expected[decided])
    seg = InstanceSegmentation(labels, majority_vote(labels, out.nt_map[0]))
    seg.check_invariants()
    # left disc is class 1, right disc class 4
    assert seg.instance_classes[labels[12, 4]] == 1 and seg.instance_classes[labels[12, 19]] == 4


def test_watershed_deterministic(gen):
    lab = touching_labels()
    out = scene(lab, {1: 1, 2: 4})
    hv = out.hv_map[0] + 0.1 * gen.standard_normal(out.hv_map[0].shape)
    e, m, f = compute_energy(out.np_map[0, 1], hv)
    assert watershed(m, e, f).tobytes() == watershed(m, e, f).tobytes()


# majority vote

def test_majority_vote_cases():
    lab = np.array([[1, 1, 1, 1, 1]])
    nt = np.zeros((5, 1, 5))
    nt[2] = 1
    assert majority_vote(lab, nt) == {1: 2}
    nt = np.zeros((5, 1, 5))
    nt[1, 0, :3] = 1
    nt[4, 0, 3:] = 1
    assert majority_vote(lab, nt) == {1: 1}
    assert majority_vote(lab, np.full((5, 1, 5), 0.2)) == {1: 1}


def test_majority_vote_ignores_background_channel():
    lab = np.array([[1, 1]])
    nt = np.zeros((3, 1, 2))
    nt[0] = 0.9
    nt[2] = 0.1
    assert majority_vote(lab, nt) == {1: 2}


# full pipeline

def test_two_disc_pipeline_classes():
    lab = two_disc_labels()
    seg = instance_segment(scene(lab, {1: 2, 2: 5}))
    assert seg.num_instances == 2
    seg.check_invariants()
    assert seg.instance_classes == {1: 2, 2: 5}
    np.testing.assert_array_equal(seg.label_map, lab)


def test_rasterize_idempotent():
    lab = two_disc_labels()
    lab[disc(lab.shape, (4, 44), 3)] = 3
    first = instance_segment(scene(lab, {1: 1, 2: 2, 3: 3}))
    second = instance_segment(rasterize(first, 6))
    np.testing.assert_array_equal(first.label_map, second.label_map)
    assert first.instance_classes == second.instance_classes


def test_fuzzed_invariants():
    gen = np.random.default_rng(99)
    for _ in range(100):
        out = random_output(gen)
        params = PostprocessParams(float(gen.uniform(0.3, 0.7)), float(gen.uniform(0.2, 0.8)),
                                   int(gen.integers(1, 15)))
        seg = instance_segment(out, params)
        seg.check_invariants()
        np.testing.assert_array_equal(seg.label_map > 0, out.np_map[0, 1] > params.np_threshold)


def test_check_invariants_catches_problems():
    with pytest.raises(ValidationError):
        InstanceSegmentation(np.array([[1, 0, 1]])).check_invariants()
    with pytest.raises(ValidationError):
        InstanceSegmentation(np.array([[2, 2, 0]])).check_invariants()


def test_from_masks_relabels_and_votes():
    inst = np.array([[0, 5, 5], [9, 9, 0]])
    cls = np.array([[0, 2, 3], [1, 1, 0]])
    seg = from_masks(inst, cls)
    np.testing.assert_array_equal(seg.label_map, [[0, 1, 1], [2, 2, 0]])
    assert seg.instance_classes == {1: 2, 2: 1}


def test_instance_hv_ranges():
    hv = instance_hv_maps(two_disc_labels())
    assert hv.min() == -1 and hv.max() == 1
