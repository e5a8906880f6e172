"""On-disk formats: NPY label patches, JSON-lines detections, JSON reports."""

from __future__ import annotations

import ast
import json
import math
import os
import struct
from typing import Any

import numpy as np

from . import __version__
from .labelmap import DEFAULT_NUM_CLASSES, CONIC_CLASSES, LabelPatch
from .metrics import ClassMetrics, MetricsReport
from .probloss import MASK_SIZE
from .roi import Detection

NPY_MAGIC = b"\x93NUMPY"
NPY_VERSION = b"\x01\x00"
NPY_ALIGN = 64
WRITE_DTYPE = "<u4"
READ_DTYPES = ("<u4", "<u2")
REPORT_SCHEMA = "nucleiseg.report/1"
COND_TOLERANCE = 1e-6


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


def npy_header(height: int, width: int) -> bytes:
    """Magic, version, length and padded header dict for an ``(H, W, 2)`` uint32 array."""
    text = f"{{'descr': '{WRITE_DTYPE}', 'fortran_order': False, 'shape': ({height}, {width}, 2), }}"
    prefix = len(NPY_MAGIC) + len(NPY_VERSION) + 2
    pad = -(prefix + len(text) + 1) % NPY_ALIGN
    text = text + " " * pad + "\n"
    return NPY_MAGIC + NPY_VERSION + struct.pack("<H", len(text)) + text.encode("latin1")


def write_label_patch(patch: LabelPatch, path: str | os.PathLike) -> None:
    stacked = np.stack([patch.instance_map, patch.class_map], axis=-1)
    if stacked.size and stacked.max() > np.iinfo(np.uint32).max:
        raise ValueError("instance IDs do not fit in 4 bytes")
    with open(path, "wb") as fh:
        fh.write(npy_header(patch.height, patch.width))
        fh.write(stacked.astype(WRITE_DTYPE).tobytes(order="C"))


def _parse_npy(data: bytes, name: str) -> np.ndarray:
    if data[:6] != NPY_MAGIC:
        raise FormatError(f"{name}: bad magic, not an NPY file")
    if data[6:8] != NPY_VERSION:
        raise FormatError(f"{name}: unsupported NPY version {tuple(data[6:8])}, expected (1, 0)")
    if len(data) < 10:
        raise FormatError(f"{name}: truncated header")
    (hlen,) = struct.unpack("<H", data[8:10])
    raw = data[10 : 10 + hlen]
    if len(raw) != hlen:
        raise FormatError(f"{name}: truncated header")
    try:
        header = ast.literal_eval(raw.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{name}: unparsable header dict") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{name}: header must declare exactly descr, fortran_order and shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if descr not in READ_DTYPES:
        raise FormatError(f"{name}: element type {descr!r} not supported, expected one of {READ_DTYPES}")
    if fortran is not False:
        raise FormatError(f"{name}: Fortran-ordered arrays are not supported")
    if not (isinstance(shape, tuple) and len(shape) == 3 and shape[2] == 2 and all(isinstance(s, int) for s in shape)):
        raise FormatError(f"{name}: shape must be (H, W, 2), got {shape!r}")
    payload = data[10 + hlen :]
    dtype = np.dtype(descr)
    expected = shape[0] * shape[1] * 2 * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{name}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def read_label_patch(path: str | os.PathLike, num_classes: int = DEFAULT_NUM_CLASSES) -> LabelPatch:
    """Load a label patch; raises FormatError or labelmap.IntegrityError."""
    with open(path, "rb") as fh:
        data = fh.read()
    arr = _parse_npy(data, os.fspath(path))
    return LabelPatch(arr[..., 0], arr[..., 1], num_classes)


def parse_detection(obj: Any, num_classes: int | None = None) -> Detection:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    missing = [k for k in ("box", "objectness", "cond", "mask") if k not in obj]
    if missing:
        raise ValueError(f"missing keys: {', '.join(missing)}")
    box, cond, mask = obj["box"], obj["cond"], obj["mask"]
    if not isinstance(box, list) or len(box) != 4:
        raise ValueError("box must be a list of 4 numbers")
    if not isinstance(cond, list) or len(cond) < 2:
        raise ValueError("cond must be a list of C+1 numbers")
    if num_classes is not None and len(cond) != num_classes + 1:
        raise ValueError(f"cond has {len(cond)} entries, expected {num_classes + 1}")
    if not isinstance(mask, list) or len(mask) != MASK_SIZE * MASK_SIZE:
        raise ValueError(f"mask must be a list of {MASK_SIZE * MASK_SIZE} numbers")
    try:
        cond = np.asarray(cond, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        objectness = float(obj["objectness"])
    except (TypeError, ValueError) as exc:
        raise ValueError("box, objectness, cond and mask must be numeric") from exc
    total = math.fsum(cond)
    if abs(total - 1.0) > COND_TOLERANCE:
        raise ValueError(f"cond sums to {total:.9g}, not 1")
    if np.any(cond < 0):
        raise ValueError("cond entries must be non-negative")
    return Detection(box, objectness, cond / total, mask)


def read_detections(path: str | os.PathLike, num_classes: int | None = None) -> list[Detection]:
    """Parse a JSON-lines detections file. Errors carry the 1-based line number."""
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                dets.append(parse_detection(json.loads(line), num_classes))
            except ValueError as exc:
                raise FormatError(f"{os.fspath(path)}:{lineno}: {exc}") from exc
    return dets


def detection_to_record(det: Detection) -> dict:
    return {
        "box": det.box.as_list(),
        "objectness": det.objectness,
        "cond": det.cond.tolist(),
        "mask": det.mask.ravel().tolist(),
    }


def class_names(num_classes: int) -> dict[int, str]:
    if num_classes == len(CONIC_CLASSES):
        return {i + 1: n for i, n in enumerate(CONIC_CLASSES)}
    return {c: f"class_{c}" for c in range(1, num_classes + 1)}


def _metrics_to_dict(m: ClassMetrics) -> dict:
    return {"dq": m.dq, "sq": m.sq, "pq": m.pq, "tp": m.tp, "fp": m.fp, "fn": m.fn, "iou_sum": m.iou_sum}


def report_to_dict(report: MetricsReport) -> dict:
    names = class_names(len(report.per_class))
    return {
        "schema": REPORT_SCHEMA,
        "tool_version": __version__,
        "patch_count": report.patch_count,
        "binary": _metrics_to_dict(report.binary),
        "multi_pq": report.multi_pq,
        "per_class": [
            {"class_id": c, "name": names[c], **_metrics_to_dict(m)} for c, m in sorted(report.per_class.items())
        ],
    }


def report_from_dict(doc: dict) -> MetricsReport:
    if doc.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"unknown report schema {doc.get('schema')!r}")
    fields = ("dq", "sq", "pq", "tp", "fp", "fn", "iou_sum")
    per_class = {row["class_id"]: ClassMetrics(**{k: row[k] for k in fields}) for row in doc["per_class"]}
    return MetricsReport(
        binary=ClassMetrics(**{k: doc["binary"][k] for k in fields}),
        per_class=per_class,
        multi_pq=doc["multi_pq"],
        patch_count=doc["patch_count"],
    )


def dumps_report(report: MetricsReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def loads_report(text: str) -> MetricsReport:
    return report_from_dict(json.loads(text))


def render_table(report: MetricsReport) -> str:
    names = class_names(len(report.per_class))
    header = f"{'class':<12} {'PQ':>8} {'DQ':>8} {'SQ':>8} {'TP':>7} {'FP':>7} {'FN':>7}"
    lines = [header, "-" * len(header)]

    def row(name: str, m: ClassMetrics) -> str:
        return f"{name:<12} {m.pq:8.4f} {m.dq:8.4f} {m.sq:8.4f} {m.tp:7d} {m.fp:7d} {m.fn:7d}"

    for c, m in sorted(report.per_class.items()):
        lines.append(row(names[c], m))
    lines.append("-" * len(header))
    lines.append(row("all nuclei", report.binary))
    lines.append(f"patches: {report.patch_count}   PQ: {report.binary.pq:.4f}   multi-PQ: {report.multi_pq:.4f}")
    return "\n".join(lines) + "\n"
