"""Instance matching and panoptic-quality style evaluation.

Instances match when their IoU is strictly above the threshold (0.5 by
default), which makes every match one-to-one. Conventions for empty scenes:
DQ is 1 when there are no instances on either side, SQ is 1 when nothing
matched (PQ then still vanishes through DQ), Dice and F1 are 1 when both
sides are empty. mPQ averages per-class PQ over classes present in ground
truth or prediction.
"""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .postprocess import InstanceSegmentation

METRIC_KEYS = ("dq", "sq", "pq", "bpq", "mpq", "dice", "f1")


def _labels(x):
    return np.asarray(x.label_map if isinstance(x, InstanceSegmentation) else x)


def iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"pixel sets live on different grids: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise DomainError("IoU of two empty sets is undefined")
    return np.count_nonzero(a & b) / union


@dataclass
class MatchResult:
    matches: List[Tuple[int, int, float]]
    unmatched_gt: List[int]
    unmatched_pred: List[int]
    threshold: float = 0.5

    @property
    def tp(self):
        return len(self.matches)

    @property
    def fp(self):
        return len(self.unmatched_pred)

    @property
    def fn(self):
        return len(self.unmatched_gt)


def match_instances(gt, pred, threshold=0.5) -> MatchResult:
    """All (gt, pred) pairs with IoU > threshold; unique for threshold >= 0.5."""
    if threshold < 0.5:
        raise DomainError(f"matching threshold must be >= 0.5 for one-to-one matches, got {threshold}")
    g = _labels(gt).astype(np.int64)
    p = _labels(pred).astype(np.int64)
    if g.shape != p.shape:
        raise ShapeError(f"ground truth {g.shape} and prediction {p.shape} differ in size")
    gt_ids = np.unique(g[g > 0])
    pred_ids = np.unique(p[p > 0])
    g_area = np.bincount(g.ravel())
    p_area = np.bincount(p.ravel())
    both = (g > 0) & (p > 0)
    matches = []
    if both.any():
        width = int(p.max()) + 1
        pairs, inter = np.unique(g[both] * width + p[both], return_counts=True)
        for code, n in zip(pairs.tolist(), inter.tolist()):
            gi, pi = divmod(code, width)
            value = n / (g_area[gi] + p_area[pi] - n)
            if value > threshold:
                matches.append((gi, pi, float(value)))
    matches.sort()
    matched_g = {m[0] for m in matches}
    matched_p = {m[1] for m in matches}
    return MatchResult(matches,
                       [int(i) for i in gt_ids if i not in matched_g],
                       [int(i) for i in pred_ids if i not in matched_p],
                       threshold)


def dq(match: MatchResult):
    denom = match.tp + 0.5 * match.fp + 0.5 * match.fn
    return 1.0 if denom == 0 else match.tp / denom


def sq(match: MatchResult):
    if match.tp == 0:
        return 1.0
    return sum(m[2] for m in match.matches) / match.tp


def pq(match: MatchResult):
    return dq(match) * sq(match)


def bpq(gt, pred, threshold=0.5):
    return pq(match_instances(gt, pred, threshold))


def _class_filtered(seg: InstanceSegmentation, cls):
    ids = [i for i, c in seg.instance_classes.items() if c == cls]
    lab = seg.label_map
    return np.where(np.isin(lab, ids), lab, 0), bool(ids)


def per_class_pq(gt: InstanceSegmentation, pred: InstanceSegmentation, num_classes, threshold=0.5):
    """PQ per nucleus class 1..num_classes-1, only for classes present on either side."""
    out = {}
    for cls in range(1, num_classes):
        g, g_present = _class_filtered(gt, cls)
        p, p_present = _class_filtered(pred, cls)
        if g_present or p_present:
            out[cls] = pq(match_instances(g, p, threshold))
    return out


def mpq(gt: InstanceSegmentation, pred: InstanceSegmentation, num_classes, threshold=0.5):
    scores = per_class_pq(gt, pred, num_classes, threshold)
    if not scores:
        raise DomainError("no nucleus class is present in ground truth or prediction")
    return sum(scores.values()) / len(scores)


def dice(gt_fg, pred_fg):
    a = np.asarray(gt_fg, dtype=bool)
    b = np.asarray(pred_fg, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"masks differ in size: {a.shape} vs {b.shape}")
    tp = np.count_nonzero(a & b)
    denom = 2 * tp + np.count_nonzero(b & ~a) + np.count_nonzero(a & ~b)
    return 1.0 if denom == 0 else 2 * tp / denom


def detection_f1(match: MatchResult):
    denom = 2 * match.tp + match.fp + match.fn
    return 1.0 if denom == 0 else 2 * match.tp / denom


@dataclass
class MetricsReport:
    dq: float
    sq: float
    pq: float
    bpq: float
    mpq: Optional[float]
    dice: float
    f1: float
    per_class_pq: Dict[int, float] = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tp_m: int = 0
    fp_m: int = 0
    fn_m: int = 0

    def to_dict(self):
        d = asdict(self)
        d["per_class_pq"] = {str(k): v for k, v in self.per_class_pq.items()}
        return d


def evaluate(gt: InstanceSegmentation, pred: InstanceSegmentation, num_classes, threshold=0.5) -> MetricsReport:
    """All metrics for one image. ``mpq`` is None when no class is present."""
    g = _labels(gt)
    p = _labels(pred)
    match = match_instances(g, p, threshold)
    classes = per_class_pq(gt, pred, num_classes, threshold)
    gf, pf = g > 0, p > 0
    return MetricsReport(
        dq=dq(match), sq=sq(match), pq=pq(match), bpq=pq(match),
        mpq=sum(classes.values()) / len(classes) if classes else None,
        dice=dice(gf, pf), f1=detection_f1(match), per_class_pq=classes,
        tp=int(np.count_nonzero(gf & pf)), fp=int(np.count_nonzero(pf & ~gf)), fn=int(np.count_nonzero(gf & ~pf)),
        tp_m=match.tp, fp_m=match.fp, fn_m=match.fn)


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


@dataclass
class AggregateReport:
    per_tissue: Dict[str, Dict[str, Optional[float]]]
    overall: Dict[str, Optional[float]]
    per_class: Dict[int, Optional[float]]
    images_per_tissue: Dict[str, int]


def aggregate(reports) -> AggregateReport:
    """Mean per tissue, then the unweighted mean over tissues.

    ``reports`` is a sequence of (tissue, MetricsReport). Per-class PQ is
    averaged over the images in which the class occurs.
    """
    reports = list(reports)
    if not reports:
        raise DomainError("cannot aggregate an empty list of reports")
    by_tissue = defaultdict(list)
    for tissue, rep in reports:
        by_tissue[tissue].append(rep)
    per_tissue = {t: {k: _mean(getattr(r, k) for r in reps) for k in METRIC_KEYS}
                  for t, reps in by_tissue.items()}
    overall = {k: _mean(row[k] for row in per_tissue.values()) for k in METRIC_KEYS}
    classes = sorted({c for _, r in reports for c in r.per_class_pq})
    per_class = {c: _mean(r.per_class_pq.get(c) for _, r in reports) for c in classes}
    return AggregateReport(per_tissue, overall, per_class, {t: len(v) for t, v in by_tissue.items()})
