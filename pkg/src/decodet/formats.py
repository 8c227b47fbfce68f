"""On-disk formats: binary tensor files, JSON-lines detections/ground truth, taxonomy JSON.

Tensor file layout (little-endian)::

    b"DDK1" | u32 rank | u32 dims[rank] | float32 payload, row-major
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .geometry import BBox
from .postprocess import Detection
from .targets import GroundTruth
from .taxonomy import Taxonomy

MAGIC = b"DDK1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def write_tensor(path, array) -> None:
    # ascontiguousarray would promote rank 0 to rank 1
    arr = np.array(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    where = str(path)
    if len(raw) < 8:
        raise DataError(f"{where}: truncated header")
    if raw[:4] != MAGIC:
        raise DataError(f"{where}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise DataError(f"{where}: truncated dims (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    expected = 4 * math.prod(dims)
    if len(raw) - offset != expected:
        raise DataError(f"{where}: payload is {len(raw) - offset} bytes, dims {list(dims)} need {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).copy()


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def _field(rec, key, lineno, path):
    if not isinstance(rec, dict) or key not in rec:
        raise DataError(f"{path}:{lineno}: missing field {key!r}")
    return rec[key]


def _parse_box(rec, lineno, path) -> BBox:
    raw = _field(rec, "box", lineno, path)
    if not isinstance(raw, list) or len(raw) != 4:
        raise DataError(f"{path}:{lineno}: field 'box' must be [x1, y1, x2, y2]")
    try:
        return BBox.from_seq(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}:{lineno}: field 'box': {exc}") from None


def _parse_int(rec, key, lineno, path, default=None) -> int:
    if default is not None and key not in rec:
        return default
    value = _field(rec, key, lineno, path)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise DataError(f"{path}:{lineno}: field {key!r} must be a non-negative integer")
    return value


def read_detections(path, num_classes: int | None = None) -> list[Detection]:
    out = []
    for lineno, rec in _iter_jsonl(path):
        box = _parse_box(rec, lineno, path)
        cls = _parse_int(rec, "class", lineno, path)
        if num_classes is not None and cls >= num_classes:
            raise DataError(f"{path}:{lineno}: field 'class' = {cls} is not a known class (C={num_classes})")
        score = _field(rec, "score", lineno, path)
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise DataError(f"{path}:{lineno}: field 'score' must be a number in [0, 1]")
        out.append(Detection(box, cls, float(score), _parse_int(rec, "image", lineno, path, default=0)))
    return out


def write_detections(path, dets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict()) + "\n")


def read_ground_truth(path, num_classes: int | None = None) -> list[GroundTruth]:
    out = []
    for lineno, rec in _iter_jsonl(path):
        box = _parse_box(rec, lineno, path)
        cls = _parse_int(rec, "class", lineno, path)
        if num_classes is not None and cls >= num_classes:
            raise DataError(f"{path}:{lineno}: field 'class' = {cls} is not a known class (C={num_classes})")
        out.append(GroundTruth(box, cls, _parse_int(rec, "image", lineno, path, default=0)))
    return out


def write_ground_truth(path, gts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in gts:
            fh.write(json.dumps(g.to_dict()) + "\n")


def read_boxes(path) -> np.ndarray:
    """JSON-lines of ``{"box": [...]}`` records (anchors, proposals) as an (N, 4) array."""
    rows = [_parse_box(rec, lineno, path).as_list() for lineno, rec in _iter_jsonl(path)]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_boxes(path, boxes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            fh.write(json.dumps({"box": [float(v) for v in row]}) + "\n")


def read_taxonomy(path) -> Taxonomy:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    try:
        return Taxonomy.from_dict(doc)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_taxonomy(path, taxonomy: Taxonomy) -> None:
    Path(path).write_text(taxonomy.to_json(), encoding="utf-8")


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
