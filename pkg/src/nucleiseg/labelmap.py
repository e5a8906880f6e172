"""Label-map data model for CoNIC-style patches.

A patch is a pair of equally sized integer grids: an instance map (0 is
background, every other value identifies one nucleus) and a class map
(0 is background, 1..C are nucleus types).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

CONIC_CLASSES = ("neutrophil", "epithelial", "lymphocyte", "plasma", "eosinophil", "connective")
DEFAULT_NUM_CLASSES = len(CONIC_CLASSES)
CONIC_PATCH_SIZE = 256


class IntegrityError(ValueError):
    """A label patch violates one of its structural invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.int64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabelPatch:
    instance_map: np.ndarray
    class_map: np.ndarray
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "instance_map", _readonly(self.instance_map))
        object.__setattr__(self, "class_map", _readonly(self.class_map))
        validate_maps(self.instance_map, self.class_map, self.num_classes)

    @property
    def height(self) -> int:
        return self.instance_map.shape[0]

    @property
    def width(self) -> int:
        return self.instance_map.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_map.shape

    @classmethod
    def empty(cls, height: int, width: int, num_classes: int = DEFAULT_NUM_CLASSES) -> "LabelPatch":
        z = np.zeros((height, width), dtype=np.int64)
        return cls(z, z, num_classes)

    def __eq__(self, other):
        if not isinstance(other, LabelPatch):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.instance_map, other.instance_map)
            and np.array_equal(self.class_map, other.class_map)
        )

    __hash__ = None

    def __repr__(self):
        n = len(np.unique(self.instance_map[self.instance_map > 0]))
        return f"LabelPatch({self.height}x{self.width}, instances={n}, num_classes={self.num_classes})"


def validate_maps(instance_map: np.ndarray, class_map: np.ndarray, num_classes: int = DEFAULT_NUM_CLASSES) -> None:
    """Raise :class:`IntegrityError` describing the first invariant violation found."""
    if instance_map.ndim != 2 or class_map.ndim != 2:
        raise IntegrityError(
            f"label maps must be 2-D, got instance {instance_map.shape} and class {class_map.shape}"
        )
    if instance_map.shape != class_map.shape:
        raise IntegrityError(f"shape mismatch: instance {instance_map.shape} vs class {class_map.shape}")

    bad = np.argwhere(instance_map < 0)
    if len(bad):
        r, c = bad[0]
        raise IntegrityError(f"negative instance ID {instance_map[r, c]} at pixel ({r}, {c})")
    bad = np.argwhere((class_map < 0) | (class_map > num_classes))
    if len(bad):
        r, c = bad[0]
        raise IntegrityError(
            f"class ID {class_map[r, c]} outside 0..{num_classes} at pixel ({r}, {c})"
        )

    fg_inst = instance_map > 0
    fg_cls = class_map > 0
    bad = np.argwhere(fg_inst != fg_cls)
    if len(bad):
        r, c = bad[0]
        if fg_inst[r, c]:
            raise IntegrityError(
                f"instance {instance_map[r, c]} has background class at pixel ({r}, {c})"
            )
        raise IntegrityError(f"class {class_map[r, c]} on background pixel ({r}, {c})")

    flat = np.flatnonzero(fg_inst)
    if flat.size == 0:
        return
    ids = instance_map.ravel()[flat]
    cls = class_map.ravel()[flat]
    order = np.argsort(ids, kind="stable")
    ids, cls, flat = ids[order], cls[order], flat[order]
    same_id = ids[1:] == ids[:-1]
    clash = np.flatnonzero(same_id & (cls[1:] != cls[:-1]))
    if clash.size:
        k = clash[0] + 1
        r, c = divmod(int(flat[k]), instance_map.shape[1])
        raise IntegrityError(
            f"instance {ids[k]} carries inconsistent class IDs ({cls[k - 1]} and {cls[k]}), "
            f"e.g. at pixel ({r}, {c})"
        )


@dataclass(frozen=True)
class InstanceRecord:
    """One nucleus. ``bbox`` is half-open: (row0, col0, row1, col1)."""

    id: int
    class_id: int
    pixels: frozenset
    bbox: tuple[int, int, int, int]

    @property
    def area(self) -> int:
        return len(self.pixels)


def extract_instances(patch: LabelPatch) -> list[InstanceRecord]:
    inst = patch.instance_map
    rows, cols = np.nonzero(inst)
    if rows.size == 0:
        return []
    ids = inst[rows, cols]
    order = np.argsort(ids, kind="stable")
    rows, cols, ids = rows[order], cols[order], ids[order]
    uniq, starts = np.unique(ids, return_index=True)
    ends = np.append(starts[1:], ids.size)

    records = []
    for iid, s, e in zip(uniq.tolist(), starts.tolist(), ends.tolist()):
        r, c = rows[s:e], cols[s:e]
        records.append(
            InstanceRecord(
                id=iid,
                class_id=int(patch.class_map[r[0], c[0]]),
                pixels=frozenset(zip(r.tolist(), c.tolist())),
                bbox=(int(r.min()), int(c.min()), int(r.max()) + 1, int(c.max()) + 1),
            )
        )
    return records


def mask_iou(a: Iterable, b: Iterable) -> float:
    """Intersection over union of two pixel sets; 0.0 when both are empty."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def horizontal_flip(patch: LabelPatch) -> LabelPatch:
    return LabelPatch(patch.instance_map[:, ::-1], patch.class_map[:, ::-1], patch.num_classes)


class _DisjointSet:
    def __init__(self):
        self.parent = [0]

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> int:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return rx
        # keep the smaller (earlier) label as root
        if ry < rx:
            rx, ry = ry, rx
        self.parent[ry] = rx
        return rx


def connected_components(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Two-pass union-find labeling of a binary grid.

    Labels are 1..n, numbered by the raster position of each component's
    first pixel.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    fg = (mask != 0).tolist()
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    if h == 0 or w == 0:
        return out

    ds = _DisjointSet()
    prov = [[0] * w for _ in range(h)]
    if connectivity == 4:
        offsets = ((-1, 0), (0, -1))
    else:
        offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1))

    for r in range(h):
        row, lab = fg[r], prov[r]
        for c in range(w):
            if not row[c]:
                continue
            found = 0
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if rr < 0 or cc < 0 or cc >= w:
                    continue
                n = prov[rr][cc]
                if n:
                    found = n if not found else ds.union(found, n)
            lab[c] = found if found else ds.make()

    # provisional labels are created in raster order and unions keep the
    # smallest label as root, so sorting roots preserves first-pixel order
    roots = [ds.find(i) for i in range(len(ds.parent))]
    final = {}
    for root in roots[1:]:
        if root not in final:
            final[root] = len(final) + 1
    lut = np.zeros(len(roots), dtype=np.int64)
    for i in range(1, len(roots)):
        lut[i] = final[roots[i]]
    return lut[np.asarray(prov, dtype=np.int64)]
