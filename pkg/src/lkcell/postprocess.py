"""HV-map watershed postprocessing: network maps -> labelled nucleus instances."""

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError, ValidationError
from .network import SegmentationOutput

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class PostprocessParams:
    np_threshold: float = 0.5
    marker_threshold: float = 0.4
    min_instance_size: int = 10

    def __post_init__(self):
        if not 0 < self.np_threshold < 1:
            raise ConfigError(f"np_threshold must lie in (0, 1), got {self.np_threshold}")
        if not 0 < self.marker_threshold < 1:
            raise ConfigError(f"marker_threshold must lie in (0, 1), got {self.marker_threshold}")
        if self.min_instance_size < 1:
            raise ConfigError(f"min_instance_size must be >= 1, got {self.min_instance_size}")


@dataclass(eq=False)
class InstanceSegmentation:
    """Label map (0 = background, instances 1..N) plus per-instance class and size."""

    label_map: np.ndarray
    instance_classes: Dict[int, int] = field(default_factory=dict)
    instance_sizes: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.label_map = np.asarray(self.label_map)
        if self.label_map.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {self.label_map.shape}")
        if not self.instance_sizes:
            ids, counts = np.unique(self.label_map[self.label_map > 0], return_counts=True)
            self.instance_sizes = {int(i): int(c) for i, c in zip(ids, counts)}

    @property
    def num_instances(self):
        return len(self.instance_sizes)

    @property
    def ids(self):
        return sorted(self.instance_sizes)

    def class_map(self):
        out = np.zeros(self.label_map.shape, dtype=np.uint8)
        for i, c in self.instance_classes.items():
            out[self.label_map == i] = c
        return out

    def check_invariants(self):
        """Raise ValidationError unless ids are contiguous, 8-connected and sizes agree."""
        lab = self.label_map
        if (lab < 0).any():
            raise ValidationError("label map has negative ids")
        ids, counts = np.unique(lab[lab > 0], return_counts=True)
        if list(ids) != list(range(1, len(ids) + 1)):
            raise ValidationError(f"label ids are not contiguous 1..N: {list(ids)[:10]}")
        if {int(i): int(c) for i, c in zip(ids, counts)} != self.instance_sizes:
            raise ValidationError("instance_sizes disagree with the label map")
        if self.instance_classes and set(self.instance_classes) != set(self.instance_sizes):
            raise ValidationError("instance_classes does not cover exactly the instances")
        for i in ids:
            _, n = ndimage.label(lab == i, structure=EIGHT_CONNECTED)
            if n != 1:
                raise ValidationError(f"instance {i} is not 8-connected ({n} pieces)")


def from_masks(instance_mask, class_mask=None):
    """InstanceSegmentation from raw masks; ids relabelled to 1..N in increasing order.

    Each instance takes the most frequent nonzero class value under it.
    """
    inst = np.asarray(instance_mask).astype(np.int64)
    ids = np.unique(inst[inst > 0])
    lut = np.zeros(int(inst.max()) + 1 if inst.size else 1, dtype=np.int64)
    lut[ids] = np.arange(1, len(ids) + 1)
    labels = lut[inst]
    classes = {}
    if class_mask is not None:
        cls = np.asarray(class_mask).astype(np.int64)
        if cls.shape != inst.shape:
            raise ShapeError(f"class mask {cls.shape} and instance mask {inst.shape} differ")
        for new_id in range(1, len(ids) + 1):
            values = cls[labels == new_id]
            values = values[values > 0]
            classes[new_id] = int(np.bincount(values).argmax()) if values.size else 0
    return InstanceSegmentation(labels, classes)


def sobel_gradient(grid, normalize=True):
    """3x3 Sobel responses (gx along columns, gy along rows) with replicate padding.

    With ``normalize`` each response is divided by its maximum absolute
    value, mapping it into [-1, 1] with zero kept at zero; an all-zero
    response stays zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or min(grid.shape) < 3:
        raise ShapeError(f"sobel needs a 2-D grid of at least 3x3, got {grid.shape}")
    padded = np.pad(grid, 1, mode="edge")
    h, w = grid.shape
    gx = np.zeros_like(grid)
    gy = np.zeros_like(grid)
    for i in range(3):
        for j in range(3):
            window = padded[i:i + h, j:j + w]
            if SOBEL_X[i, j]:
                gx += SOBEL_X[i, j] * window
            if SOBEL_Y[i, j]:
                gy += SOBEL_Y[i, j] * window
    if normalize:
        gx = _scale_abs(gx)
        gy = _scale_abs(gy)
    return gx, gy


def _scale_abs(g):
    m = np.abs(g).max()
    return g / m if m > 0 else np.zeros_like(g)


def boundary_strength(hv):
    """max(|sobel_x(h)|, |sobel_y(v)|), in [0, 1]."""
    gx, _ = sobel_gradient(hv[0])
    _, gy = sobel_gradient(hv[1])
    return np.maximum(np.abs(gx), np.abs(gy))


def label_components(mask):
    """8-connected components, numbered in row-major order of first pixel."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, n


def compute_energy(np_prob, hv, params: PostprocessParams = PostprocessParams()):
    """Return (energy, markers, foreground) for a single image.

    ``np_prob`` is the (H, W) nucleus probability, ``hv`` the (2, H, W)
    horizontal/vertical maps.
    """
    np_prob = np.asarray(np_prob, dtype=np.float64)
    hv = np.asarray(hv, dtype=np.float64)
    if np_prob.ndim != 2 or hv.shape != (2,) + np_prob.shape:
        raise ShapeError(f"np map {np_prob.shape} and hv map {hv.shape} do not agree")
    foreground = np_prob > params.np_threshold
    strength = boundary_strength(hv)
    energy = -(1.0 - strength) * foreground
    candidates, n = label_components(foreground & (strength < params.marker_threshold))
    if n:
        sizes = np.bincount(candidates.ravel(), minlength=n + 1)
        keep = sizes >= params.min_instance_size
        keep[0] = False
        markers = keep[candidates]
    else:
        markers = np.zeros_like(foreground)
    return energy, markers, foreground


def _relabel_first_seen(labels):
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = [i for _, i in sorted(zip(first, ids)) if i != 0]
    lut = np.zeros(int(labels.max()) + 1, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels]


def watershed(markers, energy, foreground):
    """Marker-controlled flooding restricted to ``foreground``.

    Pixels are claimed in order of flood level (the highest energy seen on
    the way from the marker), ties broken by row-major pixel index and then
    by marker id. Foreground components reached by no marker become one
    instance each. Labels are renumbered 1..N in row-major first-pixel order.
    """
    foreground = np.asarray(foreground, dtype=bool)
    energy = np.asarray(energy, dtype=np.float64)
    markers = np.asarray(markers)
    if markers.shape != foreground.shape or energy.shape != foreground.shape:
        raise ShapeError(f"markers {markers.shape}, energy {energy.shape} and foreground "
                         f"{foreground.shape} must share a shape")
    if markers.dtype == bool:
        seeds, _ = label_components(markers)
    else:
        seeds = markers.astype(np.int64)
    if ((seeds > 0) & ~foreground).any():
        raise ValidationError("markers must lie inside the foreground")

    h, w = foreground.shape
    labels = seeds.copy()
    fg = foreground.ravel().tolist()
    en = energy.ravel().tolist()
    lab = labels.ravel()
    done = (seeds.ravel() > 0).tolist()
    heap = []
    for idx in np.flatnonzero(seeds.ravel()).tolist():
        heap.append((-math.inf, idx, int(lab[idx])))
    heapq.heapify(heap)
    while heap:
        level, idx, label_id = heapq.heappop(heap)
        if level != -math.inf:
            if done[idx]:
                continue
            done[idx] = True
            lab[idx] = label_id
        r, c = divmod(idx, w)
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w:
                q = rr * w + cc
                if fg[q] and not done[q]:
                    heapq.heappush(heap, (max(level, en[q]), q, label_id))
    labels = lab.reshape(h, w)

    leftover = foreground & (labels == 0)
    if leftover.any():
        extra, n = label_components(leftover)
        base = int(labels.max())
        labels = np.where(extra > 0, extra + base, labels)
    return _relabel_first_seen(labels)


def majority_vote(label_map, nt_map):
    """Class per instance: argmax over summed type probabilities, background channel excluded."""
    label_map = np.asarray(label_map)
    nt_map = np.asarray(nt_map, dtype=np.float64)
    if nt_map.ndim != 3 or nt_map.shape[1:] != label_map.shape:
        raise ShapeError(f"type map {nt_map.shape} does not match label map {label_map.shape}")
    if nt_map.shape[0] < 2:
        raise ShapeError("type map needs a background channel plus at least one class")
    n = int(label_map.max()) if label_map.size else 0
    if n == 0:
        return {}
    flat = label_map.ravel()
    sums = np.stack([np.bincount(flat, weights=ch.ravel(), minlength=n + 1) for ch in nt_map[1:]])
    present = np.unique(flat[flat > 0])
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return {int(i): int(sums[:, i].argmax()) + 1 for i in present}


def instance_segment(output: SegmentationOutput, params: PostprocessParams = PostprocessParams(), index=0):
    """Full postprocessing for image ``index`` of a batch of network maps."""
    np_prob = output.np_map[index, 1]
    energy, markers, foreground = compute_energy(np_prob, output.hv_map[index], params)
    labels = watershed(markers, energy, foreground)
    return InstanceSegmentation(labels, majority_vote(labels, output.nt_map[index]))


def instance_hv_maps(label_map):
    """Horizontal / vertical distance-to-centroid maps, each side scaled into [-1, 1].

    Per instance, column (row) offsets from the instance centroid are divided
    by the largest negative and positive offset separately.
    """
    label_map = np.asarray(label_map)
    hv = np.zeros((2,) + label_map.shape, dtype=np.float64)
    rows, cols = np.indices(label_map.shape)
    for i in np.unique(label_map[label_map > 0]):
        m = label_map == i
        for ch, coord in ((0, cols), (1, rows)):
            d = coord[m] - coord[m].mean()
            neg, pos = d < 0, d > 0
            if neg.any():
                d[neg] /= -d[neg].min()
            if pos.any():
                d[pos] /= d[pos].max()
            hv[ch][m] = d
    return hv


def rasterize(seg: InstanceSegmentation, num_classes):
    """One-hot NP/NT maps and analytic HV maps reproducing ``seg`` (batch of one)."""
    lab = seg.label_map
    fg = (lab > 0).astype(np.float64)
    np_map = np.stack([1 - fg, fg])[None]
    nt = np.zeros((num_classes,) + lab.shape)
    nt[0] = 1 - fg
    for i, c in seg.instance_classes.items():
        nt[c][lab == i] = 1
    return SegmentationOutput(np_map, instance_hv_maps(lab)[None], nt[None])
