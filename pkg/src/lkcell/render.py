"""Instance-boundary overlays."""

import numpy as np

from .errors import ShapeError

# class id -> RGB; ids past the table wrap around (skipping entry 0)
PALETTE = np.array([
    [255, 255, 255],  # unknown / no class
    [255, 0, 0],      # neoplastic
    [0, 255, 0],      # inflammatory
    [0, 0, 255],      # connective
    [255, 255, 0],    # dead
    [0, 255, 255],    # epithelial
    [255, 0, 255],
    [255, 128, 0],
], dtype=np.uint8)


def class_color(cls):
    cls = int(cls)
    if cls <= 0:
        return PALETTE[0]
    return PALETTE[1 + (cls - 1) % (len(PALETTE) - 1)]


def boundary_mask(labels):
    """Instance pixels with at least one 8-neighbour carrying a different label.

    Pixels outside the image count as background.
    """
    labels = np.asarray(labels)
    padded = np.pad(labels, 1)
    h, w = labels.shape
    edge = np.zeros(labels.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                edge |= padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] != labels
    return edge & (labels > 0)


def overlay(rgb, labels, class_map=None):
    rgb = np.asarray(rgb, dtype=np.uint8)
    labels = np.asarray(labels)
    if rgb.shape[:2] != labels.shape or (class_map is not None and np.shape(class_map) != labels.shape):
        raise ShapeError(f"image {rgb.shape[:2]} and masks {labels.shape} differ in size")
    out = rgb.copy()
    edge = boundary_mask(labels)
    if class_map is None:
        out[edge] = PALETTE[0]
        return out
    cls = np.asarray(class_map)
    for c in np.unique(cls[edge]):
        out[edge & (cls == c)] = class_color(c)
    return out
