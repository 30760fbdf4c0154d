"""PNG mask/image I/O and dataset manifests."""

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError, ValidationError

FOLDS = (0, 1, 2)


def _atomic_save(img: Image.Image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_rgb(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_rgb(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"RGB image must be (H, W, 3), got {rgb.shape}")
    _atomic_save(Image.fromarray(rgb, mode="RGB"), path)


def write_instance_mask(path, labels):
    """16-bit grayscale PNG, pixel value = instance id."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"instance mask must be 2-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise ValidationError("instance ids must fit in 16 bits")
    _atomic_save(Image.fromarray(labels.astype(np.uint16)), path)


def read_instance_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: instance mask must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def write_class_mask(path, classes):
    """8-bit grayscale PNG, pixel value = class id."""
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise ShapeError(f"class mask must be 2-D, got {classes.shape}")
    if classes.size and (classes.min() < 0 or classes.max() > 255):
        raise ValidationError("class ids must fit in 8 bits")
    _atomic_save(Image.fromarray(classes.astype(np.uint8), mode="L"), path)


def read_class_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: class mask must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def read_masks(instance_path, class_path):
    inst = read_instance_mask(instance_path)
    cls = read_class_mask(class_path)
    if inst.shape != cls.shape:
        raise ShapeError(f"instance mask {inst.shape} and class mask {cls.shape} differ in size")
    if ((inst > 0) != (cls > 0)).any():
        raise ValidationError(f"{class_path}: class mask must be nonzero exactly where the instance mask is")
    return inst, cls


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    instance_mask: Path
    class_mask: Path
    tissue: str
    fold: int

    @property
    def key(self):
        return self.image.stem


def load_manifest(path):
    """Read a JSON manifest: {"records": [{image, instance_mask, class_mask, tissue, fold}, ...]}.

    Relative paths resolve against the manifest's directory. A bare list of
    records is accepted as well.
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    raw = doc["records"] if isinstance(doc, dict) else doc
    base = path.parent
    records = []
    for i, rec in enumerate(raw):
        try:
            paths = [base / rec[k] for k in ("image", "instance_mask", "class_mask")]
            tissue, fold = str(rec["tissue"]), int(rec["fold"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"manifest record {i} is malformed: {exc}") from None
        for p in paths:
            if not p.exists():
                raise ValidationError(f"manifest record {i}: {p} does not exist")
        if fold not in FOLDS:
            raise ValidationError(f"manifest record {i}: fold {fold} not in {FOLDS}")
        records.append(ManifestRecord(*paths, tissue, fold))
    return records


def write_manifest(path, records):
    path = Path(path)
    base = path.parent
    out = []
    for r in records:
        out.append({"image": os.path.relpath(r.image, base),
                    "instance_mask": os.path.relpath(r.instance_mask, base),
                    "class_mask": os.path.relpath(r.class_mask, base),
                    "tissue": r.tissue, "fold": r.fold})
    path.write_text(json.dumps({"records": out}, indent=2))
