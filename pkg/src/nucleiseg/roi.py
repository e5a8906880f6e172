"""Second-stage geometry: boxes, NMS, RoIAlign, mask resize and paste-back.

Coordinate conventions
----------------------
* RoIAlign treats feature ``fm[:, i, j]`` as the value at continuous point
  ``(x=j, y=i)``; there is no half-pixel offset.
* Mask paste-back treats image pixel ``(r, c)`` as the unit square
  ``[c, c+1) x [r, r+1)`` and decides membership by its center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labelmap import LabelPatch
from .probloss import MASK_SIZE, fuse_scores

DEFAULT_NMS_IOU = 0.5
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}: need x2 > x1 and y2 > y1")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"a box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True, eq=False)
class Detection:
    """One proposal with its two-stage scores and a fixed-size mask.

    ``fused``, ``label`` and ``score`` are derived on construction.
    """

    box: Box
    objectness: float
    cond: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        box = self.box if isinstance(self.box, Box) else Box.from_seq(self.box)
        fused = fuse_scores(self.objectness, self.cond)
        mask = np.array(self.mask, dtype=np.float64).reshape(MASK_SIZE, MASK_SIZE)
        if np.any(mask < 0) or np.any(mask > 1) or not np.all(np.isfinite(mask)):
            raise ValueError("mask probabilities must lie in [0, 1]")
        cond = np.array(self.cond, dtype=np.float64)
        for a in (cond, mask, fused):
            a.setflags(write=False)
        fg = fused[1:]
        label = int(np.argmax(fg)) + 1
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "objectness", float(self.objectness))
        object.__setattr__(self, "cond", cond)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "fused", fused)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "score", float(fused[label]))

    @property
    def num_classes(self) -> int:
        return self.cond.size - 1


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # stable sort: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy class-agnostic non-maximum suppression."""
    kept: list[Detection] = []
    for i in _score_order(dets):
        d = dets[i]
        if all(box_iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def _lerp_coords(coords: np.ndarray, size: int):
    coords = np.clip(coords, 0.0, size - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, coords - lo


def roi_align(features, box: Box, out_h: int, out_w: int, sampling_ratio: int = 2) -> np.ndarray:
    """Average of bilinear samples inside each of ``out_h x out_w`` bins.

    ``features`` is ``(C, H, W)`` (or ``(H, W)`` for one channel); the result
    is ``(out_h, out_w, C)``.
    """
    if not isinstance(box, Box):
        box = Box.from_seq(box)
    if out_h < 1 or out_w < 1 or sampling_ratio < 1:
        raise ValueError("output size and sampling ratio must be >= 1")
    fm = np.asarray(features, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[None]
    if fm.ndim != 3 or fm.shape[1] == 0 or fm.shape[2] == 0:
        raise ValueError(f"feature map must be (C, H, W), got shape {fm.shape}")
    _, h, w = fm.shape
    sr = sampling_ratio

    bin_h, bin_w = box.height / out_h, box.width / out_w
    offsets = (np.arange(sr) + 0.5) / sr
    ys = box.y1 + ((np.arange(out_h)[:, None] + offsets[None, :]) * bin_h).ravel()
    xs = box.x1 + ((np.arange(out_w)[:, None] + offsets[None, :]) * bin_w).ravel()
    y0, y1, ly = _lerp_coords(ys, h)
    x0, x1, lx = _lerp_coords(xs, w)

    # lerp form a + t*(b - a) reproduces constant maps bit-exactly
    rows0, rows1 = fm[:, y0], fm[:, y1]
    top = rows0[:, :, x0] + lx * (rows0[:, :, x1] - rows0[:, :, x0])
    bot = rows1[:, :, x0] + lx * (rows1[:, :, x1] - rows1[:, :, x0])
    vals = top + ly[:, None] * (bot - top)

    vals = vals.reshape(fm.shape[0], out_h, sr, out_w, sr)
    first = vals[:, :, :1, :, :1]
    pooled = first[:, :, 0, :, 0] + (vals - first).mean(axis=(2, 4))
    return pooled.transpose(1, 2, 0)


def _pool_matrix(src: int, dst: int) -> np.ndarray:
    """Integer overlap lengths between ``dst`` equal bins and ``src`` unit cells, in units of 1/dst."""
    edges_src = np.arange(src + 1) * dst
    edges_dst = np.arange(dst + 1) * src
    lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
    hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
    return np.maximum(hi - lo, 0).astype(np.int64)


def resize_mask_to(gt, size: int = MASK_SIZE) -> np.ndarray:
    """Area-average pool a binary mask onto a ``size x size`` grid and binarize at 0.5.

    Computed in integers so cells whose mean is exactly one half are
    resolved deterministically (to 1).
    """
    gt = np.asarray(gt)
    if gt.ndim != 2 or gt.shape[0] < 1 or gt.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {gt.shape}")
    h, w = gt.shape
    g = (gt != 0).astype(np.int64)
    py, px = _pool_matrix(h, size), _pool_matrix(w, size)
    covered = py @ g @ px.T
    # each output cell spans h x w area units
    return (2 * covered >= h * w).astype(np.uint8)


def _footprint(lo: float, hi: float, limit: int) -> np.ndarray:
    """Pixel indices whose centers fall in [lo, hi), clipped to [0, limit)."""
    start = max(math.ceil(lo - 0.5), 0)
    stop = min(math.ceil(hi - 0.5), limit)
    return np.arange(start, max(stop, start))


def paste_mask(mask, box: Box, img_h: int, img_w: int, threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Resample a fixed-size mask onto the box footprint of an ``img_h x img_w`` image."""
    if not isinstance(box, Box):
        box = Box.from_seq(box)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    mh, mw = m.shape
    out = np.zeros((img_h, img_w), dtype=bool)
    rows = _footprint(box.y1, box.y2, img_h)
    cols = _footprint(box.x1, box.x2, img_w)
    if rows.size == 0 or cols.size == 0:
        return out

    # pixel centers -> mask cell-center coordinates
    v = (rows + 0.5 - box.y1) / box.height * mh - 0.5
    u = (cols + 0.5 - box.x1) / box.width * mw - 0.5
    y0, y1, ly = _lerp_coords(v, mh)
    x0, x1, lx = _lerp_coords(u, mw)
    top = m[y0][:, x0] + lx * (m[y0][:, x1] - m[y0][:, x0])
    bot = m[y1][:, x0] + lx * (m[y1][:, x1] - m[y1][:, x0])
    vals = top + ly[:, None] * (bot - top)
    out[np.ix_(rows, cols)] = vals >= threshold
    return out


def detections_to_labelpatch(
    dets: Sequence[Detection],
    img_h: int,
    img_w: int,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    mask_threshold: float = DEFAULT_MASK_THRESHOLD,
    num_classes: int | None = None,
) -> LabelPatch:
    """Rasterize detections into a label patch, highest score first.

    Pixels already claimed by a higher-scoring instance are never reassigned;
    a detection left with no pixels is skipped without consuming an ID.
    """
    if num_classes is None:
        num_classes = dets[0].num_classes if dets else 6
    inst = np.zeros((img_h, img_w), dtype=np.int64)
    cls = np.zeros((img_h, img_w), dtype=np.int64)
    next_id = 1
    for i in _score_order(dets):
        d = dets[i]
        if d.score <= score_threshold:
            continue
        if d.label > num_classes:
            raise ValueError(f"detection label {d.label} outside 1..{num_classes}")
        region = paste_mask(d.mask, d.box, img_h, img_w, mask_threshold) & (inst == 0)
        if not region.any():
            continue
        inst[region] = next_id
        cls[region] = d.label
        next_id += 1
    return LabelPatch(inst, cls, num_classes)
