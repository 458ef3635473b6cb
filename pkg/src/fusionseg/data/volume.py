"""VVOL volume files and the dataset manifest.

A volume ``<name>`` is stored as two siblings:

``<name>.vvol.json``
    ``{"magic": "VVOL1", "dtype": "f32" | "u8", "shape": [D, H, W] or [C, D, H, W],
    "order": "row-major"}``
``<name>.vvol.bin``
    little-endian payload, last axis contiguous.

The manifest is a JSON-lines file, one patient per line with the fields
``id``, ``grade`` (``LGG``/``HGG``), ``t1``, ``t1c``, ``t2``, ``flair`` and
``label``.  Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import (DataError, HeaderValidationError, MagicMismatchError,
                      TruncatedPayloadError, VolumeFormatError)

MAGIC = "VVOL1"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
MODALITIES = ("t1", "t1c", "t2", "flair")
GRADES = ("LGG", "HGG")


class PayloadSizeError(VolumeFormatError):
    """Payload is longer than the header's shape implies."""


def _base(path) -> str:
    path = os.fspath(path)
    for suffix in (".vvol.json", ".vvol.bin", ".vvol"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def header_path(path) -> Path:
    return Path(_base(path) + ".vvol.json")


def payload_path(path) -> Path:
    return Path(_base(path) + ".vvol.bin")


def store_volume(path, volume) -> Path:
    """Write ``volume`` as VVOL; floats become f32, integers u8."""
    volume = np.asarray(volume)
    if np.issubdtype(volume.dtype, np.floating):
        code = "f32"
    elif np.issubdtype(volume.dtype, np.integer) or volume.dtype == bool:
        if volume.size and (volume.min() < 0 or volume.max() > 255):
            raise DataError("integer volume does not fit in u8")
        code = "u8"
    else:
        raise DataError(f"unsupported volume dtype {volume.dtype}")
    if volume.ndim not in (3, 4):
        raise DataError(f"volume must be 3D or 4D, got shape {volume.shape}")
    header = {"magic": MAGIC, "dtype": code, "shape": list(volume.shape), "order": "row-major"}
    hp = header_path(path)
    hp.parent.mkdir(parents=True, exist_ok=True)
    hp.write_text(json.dumps(header, sort_keys=True) + "\n")
    payload_path(path).write_bytes(np.ascontiguousarray(volume, dtype=DTYPES[code]).tobytes())
    return hp


def read_header(path) -> dict:
    hp = header_path(path)
    try:
        header = json.loads(hp.read_text())
    except FileNotFoundError:
        raise DataError(f"volume header not found: {hp}") from None
    except json.JSONDecodeError as exc:
        raise HeaderValidationError(f"{hp}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        got = header.get("magic") if isinstance(header, dict) else None
        raise MagicMismatchError(f"{hp}: magic {got!r} != {MAGIC!r}")
    if header.get("dtype") not in DTYPES:
        raise HeaderValidationError(f"{hp}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "row-major") != "row-major":
        raise HeaderValidationError(f"{hp}: unsupported order {header.get('order')!r}")
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) not in (3, 4)
            or not all(isinstance(n, int) and not isinstance(n, bool) for n in shape)):
        raise HeaderValidationError(f"{hp}: shape must be a list of 3 or 4 integers, got {shape!r}")
    if min(shape) <= 0:
        raise HeaderValidationError(f"{hp}: extents must be positive, got {shape}")
    return header


def load_volume(path):
    """Return ``(array, header)``; bit-exact inverse of :func:`store_volume`."""
    header = read_header(path)
    dtype = DTYPES[header["dtype"]]
    expected = math.prod(header["shape"]) * dtype.itemsize
    pp = payload_path(path)
    try:
        raw = pp.read_bytes()
    except FileNotFoundError:
        raise DataError(f"volume payload not found: {pp}") from None
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{pp}: payload has {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise PayloadSizeError(f"{pp}: payload has {len(raw)} bytes but shape "
                               f"{header['shape']} implies {expected}")
    array = np.frombuffer(raw, dtype=dtype).reshape(header["shape"])
    return array.astype(dtype.newbyteorder("="), copy=True), header


@dataclass
class PatientRecord:
    id: str
    grade: str
    modality_paths: dict
    label_path: Path
    shape: tuple = field(default=None)

    def __post_init__(self):
        if self.grade not in GRADES:
            raise DataError(f"patient {self.id}: grade must be LGG or HGG, got {self.grade!r}")
        missing = [m for m in MODALITIES if m not in self.modality_paths]
        if missing:
            raise DataError(f"patient {self.id}: missing modalities {missing}")

    def load_modalities(self) -> np.ndarray:
        """Raw ``(4, D, H, W)`` f32 stack in t1, t1c, t2, flair order."""
        vols = [load_volume(self.modality_paths[m])[0] for m in MODALITIES]
        shapes = {v.shape for v in vols}
        if len(shapes) != 1 or len(vols[0].shape) != 3:
            raise DataError(f"patient {self.id}: modality shapes disagree: {sorted(shapes)}")
        return np.stack(vols).astype(np.float32)

    def load_label(self) -> np.ndarray:
        label, _ = load_volume(self.label_path)
        if label.ndim != 3:
            raise DataError(f"patient {self.id}: label must be 3D, got {label.shape}")
        if label.size and label.max() > 4:
            raise DataError(f"patient {self.id}: label ids must be in 0..4, found {label.max()}")
        return label.astype(np.uint8)


@dataclass
class DatasetManifest:
    records: list

    def __post_init__(self):
        ids = [r.id for r in self.records]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DataError(f"duplicate patient ids in manifest: {sorted(dup)}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def counts_by_grade(self) -> dict:
        return {g: sum(r.grade == g for r in self.records) for g in GRADES}

    def by_id(self, ids) -> list:
        lookup = {r.id: r for r in self.records}
        try:
            return [lookup[i] for i in ids]
        except KeyError as exc:
            raise DataError(f"unknown patient id {exc.args[0]!r}") from None

    def save(self, path):
        path = Path(path)
        root = path.parent
        lines = []
        for r in self.records:
            rec = {"id": r.id, "grade": r.grade}
            for m in MODALITIES:
                rec[m] = os.path.relpath(r.modality_paths[m], root)
            rec["label"] = os.path.relpath(r.label_path, root)
            if r.shape is not None:
                rec["shape"] = list(r.shape)
            lines.append(json.dumps(rec, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        root = path.parent
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                paths = {m: root / rec[m] for m in MODALITIES}
                record = PatientRecord(str(rec["id"]), rec["grade"], paths, root / rec["label"],
                                       tuple(rec["shape"]) if "shape" in rec else None)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record ({exc!r})") from None
            if check_paths:
                for p in list(record.modality_paths.values()) + [record.label_path]:
                    if not header_path(p).is_file():
                        raise DataError(f"{path}:{lineno}: volume {p} does not exist")
            records.append(record)
        return cls(records)
