"""Panoptic-quality evaluation of instance label patches.

Instances are matched one-to-one when their mask IoU exceeds 0.5. An IoU above
0.5 means the intersection covers more than half of both masks, and instances
of one label map are disjoint, so no instance can match two others and no
assignment solver is needed.
Counts are pooled over the whole dataset before ratios are formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .labelmap import DEFAULT_NUM_CLASSES, LabelPatch, extract_instances, mask_iou

BRUTE_FORCE_LIMIT = 12
# above this, instance IDs are compacted before histogramming
_DIRECT_ID_LIMIT = 1 << 12


@dataclass(frozen=True)
class MatchResult:
    true_positives: list[tuple[int, int, float]] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)

    def tp_pairs(self) -> set[tuple[int, int]]:
        return {(g, p) for g, p, _ in self.true_positives}


@dataclass(frozen=True)
class ClassMetrics:
    dq: float
    sq: float
    pq: float
    tp: int
    fp: int
    fn: int
    iou_sum: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, iou_sum: float) -> "ClassMetrics":
        denom = tp + 0.5 * fp + 0.5 * fn
        dq = tp / denom if denom > 0 else 0.0
        sq = iou_sum / tp if tp > 0 else 0.0
        return cls(dq=dq, sq=sq, pq=dq * sq, tp=tp, fp=fp, fn=fn, iou_sum=iou_sum)

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0


@dataclass(frozen=True)
class MetricsReport:
    binary: ClassMetrics
    per_class: dict[int, ClassMetrics]
    multi_pq: float
    patch_count: int


class _Overlap:
    """Instance areas, classes and pairwise intersections for one patch pair."""

    def __init__(self, gt: LabelPatch, pred: LabelPatch):
        if gt.shape != pred.shape:
            raise ValueError(f"patch dimensions differ: gt {gt.shape} vs pred {pred.shape}")
        self.gt_ids, g, self.gt_area, self.gt_cls = _compact(gt)
        self.pred_ids, p, self.pred_area, self.pred_cls = _compact(pred)

        both = (g > 0) & (p > 0)
        n_pred = self.pred_ids.size + 1
        inter = np.bincount(g[both] * n_pred + p[both], minlength=(self.gt_ids.size + 1) * n_pred)
        keys = np.flatnonzero(inter)
        self.pair_g, self.pair_p = np.divmod(keys, n_pred)
        self.pair_inter = inter[keys]
        self.pair_union = self.gt_area[self.pair_g] + self.pred_area[self.pair_p] - self.pair_inter

    def match(self, class_aware: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Compact (gt, pred) indices and IoUs of matched pairs, ordered by gt ID."""
        # integer form of inter / union > 0.5
        ok = 2 * self.pair_inter > self.pair_union
        if class_aware:
            ok &= self.gt_cls[self.pair_g] == self.pred_cls[self.pair_p]
        g, p = self.pair_g[ok], self.pair_p[ok]
        if np.unique(g).size != g.size or np.unique(p).size != p.size:
            raise RuntimeError("IoU > 0.5 matching produced a non-unique assignment")
        iou = self.pair_inter[ok] / self.pair_union[ok]
        return g, p, iou


def _compact(patch: LabelPatch):
    """Flattened instance map relabeled to 1..n, with original IDs, areas and classes.

    Index 0 of the returned per-instance arrays is background.
    """
    flat = patch.instance_map.ravel()
    cls_flat = patch.class_map.ravel()
    top = int(flat.max()) if flat.size else 0
    if top < _DIRECT_ID_LIMIT:
        area = np.bincount(flat, minlength=top + 1)
        ids = np.flatnonzero(area)
        ids = ids[ids > 0]
        lut = np.zeros(top + 1, dtype=np.int64)
        lut[ids] = np.arange(1, ids.size + 1)
        compact = lut[flat]
    else:
        ids, compact = np.unique(flat, return_inverse=True)
        if ids[0] != 0:
            ids = np.concatenate(([0], ids))
            compact = compact + 1
        ids = ids[1:]
    n = ids.size
    areas = np.bincount(compact, minlength=n + 1)
    classes = np.zeros(n + 1, dtype=np.int64)
    classes[compact] = cls_flat
    return ids, compact, areas, classes


def _to_result(ov: _Overlap, g, p, iou) -> MatchResult:
    tps = [(int(ov.gt_ids[a - 1]), int(ov.pred_ids[b - 1]), float(v)) for a, b, v in zip(g, p, iou)]
    g_hit = np.zeros(ov.gt_ids.size + 1, dtype=bool)
    p_hit = np.zeros(ov.pred_ids.size + 1, dtype=bool)
    g_hit[g] = True
    p_hit[p] = True
    fps = ov.pred_ids[~p_hit[1:]].tolist()
    fns = ov.gt_ids[~g_hit[1:]].tolist()
    return MatchResult(tps, fps, fns)


def match_instances(gt: LabelPatch, pred: LabelPatch, class_aware: bool = False) -> MatchResult:
    ov = _Overlap(gt, pred)
    return _to_result(ov, *ov.match(class_aware))


def brute_force_match(gt: LabelPatch, pred: LabelPatch, class_aware: bool = False) -> MatchResult:
    """Exhaustive maximum-cardinality, then maximum-IoU matching over pairs with IoU > 0.5.

    Makes no use of the uniqueness argument; meant as a test oracle for small patches.
    """
    if gt.shape != pred.shape:
        raise ValueError(f"patch dimensions differ: gt {gt.shape} vs pred {pred.shape}")
    gts, preds = extract_instances(gt), extract_instances(pred)
    if len(gts) + len(preds) > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"brute_force_match is limited to {BRUTE_FORCE_LIMIT} instances, got {len(gts) + len(preds)}"
        )
    admissible = []
    for g in gts:
        row = []
        for j, p in enumerate(preds):
            if class_aware and g.class_id != p.class_id:
                continue
            iou = mask_iou(g.pixels, p.pixels)
            if iou > 0.5:
                row.append((j, iou))
        admissible.append(row)

    best = (0, 0.0, ())

    def search(i: int, used: frozenset, chosen: tuple, total: float):
        nonlocal best
        if i == len(gts):
            if (len(chosen), total) > best[:2]:
                best = (len(chosen), total, chosen)
            return
        search(i + 1, used, chosen, total)
        for j, iou in admissible[i]:
            if j not in used:
                search(i + 1, used | {j}, chosen + ((i, j, iou),), total + iou)

    search(0, frozenset(), (), 0.0)
    chosen = best[2]
    tps = [(gts[i].id, preds[j].id, iou) for i, j, iou in chosen]
    g_used = {i for i, _, _ in chosen}
    p_used = {j for _, j, _ in chosen}
    return MatchResult(
        tps,
        [p.id for j, p in enumerate(preds) if j not in p_used],
        [g.id for i, g in enumerate(gts) if i not in g_used],
    )


def compute_pq(m: MatchResult) -> ClassMetrics:
    return ClassMetrics.from_counts(
        len(m.true_positives),
        len(m.false_positives),
        len(m.false_negatives),
        math.fsum(iou for _, _, iou in m.true_positives),
    )


@dataclass
class PatchStats:
    """Match outcome of one patch pair, reduced to what pooling needs.

    ``*_ious`` hold TP IoUs; ``per_class`` rows are (tp, fp, fn) by class ID.
    """

    binary_counts: tuple[int, int, int]
    binary_ious: list[float]
    per_class: np.ndarray
    class_ious: dict[int, list[float]]


def patch_stats(gt: LabelPatch, pred: LabelPatch, num_classes: int = DEFAULT_NUM_CLASSES) -> PatchStats:
    ov = _Overlap(gt, pred)
    n_gt, n_pred = ov.gt_ids.size, ov.pred_ids.size

    g, p, iou = ov.match(class_aware=False)
    binary = (g.size, n_pred - p.size, n_gt - g.size)
    binary_ious = iou.tolist()

    g, p, iou = ov.match(class_aware=True)
    k = num_classes + 1
    tp = np.bincount(ov.gt_cls[g], minlength=k)
    gt_total = np.bincount(ov.gt_cls[1:], minlength=k)
    pred_total = np.bincount(ov.pred_cls[1:], minlength=k)
    if tp.size > k or gt_total.size > k or pred_total.size > k:
        raise ValueError(f"class IDs exceed num_classes={num_classes}")
    per_class = np.stack([tp, pred_total - tp, gt_total - tp], axis=1)
    class_ious: dict[int, list[float]] = {}
    for c, v in zip(ov.gt_cls[g].tolist(), iou.tolist()):
        class_ious.setdefault(c, []).append(v)
    return PatchStats(binary, binary_ious, per_class, class_ious)


def aggregate(stats: Sequence[PatchStats], num_classes: int = DEFAULT_NUM_CLASSES) -> MetricsReport:
    """Pool per-patch statistics (in the given order) into a report."""
    if len(stats) == 0:
        raise ValueError("cannot aggregate an empty dataset")
    tp = fp = fn = 0
    ious: list[float] = []
    counts = np.zeros((num_classes + 1, 3), dtype=np.int64)
    class_ious: dict[int, list[float]] = {c: [] for c in range(1, num_classes + 1)}
    for s in stats:
        tp += s.binary_counts[0]
        fp += s.binary_counts[1]
        fn += s.binary_counts[2]
        ious.extend(s.binary_ious)
        counts += s.per_class
        for c, v in s.class_ious.items():
            class_ious[c].extend(v)

    binary = ClassMetrics.from_counts(tp, fp, fn, math.fsum(ious))
    per_class = {
        c: ClassMetrics.from_counts(*(int(x) for x in counts[c]), math.fsum(class_ious[c]))
        for c in range(1, num_classes + 1)
    }
    present = [m.pq for m in per_class.values() if m.present]
    multi_pq = math.fsum(present) / len(present) if present else 0.0
    return MetricsReport(binary, per_class, multi_pq, len(stats))


def evaluate_dataset(
    pairs: Iterable[tuple[LabelPatch, LabelPatch]], num_classes: int = DEFAULT_NUM_CLASSES
) -> MetricsReport:
    stats = [patch_stats(gt, pred, num_classes) for gt, pred in pairs]
    if not stats:
        raise ValueError("evaluate_dataset needs at least one (gt, pred) pair")
    return aggregate(stats, num_classes)
