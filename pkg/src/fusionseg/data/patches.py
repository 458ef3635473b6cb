"""Normalization, patient split, patch sampling and tiled full-volume inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .volume import DatasetManifest, GRADES, PatientRecord

log = logging.getLogger(__name__)

INPUT_PATCH = 25
OUTPUT_PATCH = 9


def normalize_intensity(volume) -> np.ndarray:
    """Min-max scale one scalar volume to [0, 1]; a constant volume maps to zeros."""
    v = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError("cannot normalize a volume containing NaN or Inf")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.float32)
    out = (v - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def grade_quota(counts: dict, test_count: int) -> dict:
    """Per-grade test counts preserving the LGG/HGG ratio (LGG rounded half-up)."""
    total = sum(counts.values())
    lgg = int(np.floor(test_count * counts["LGG"] / total + 0.5)) if total else 0
    return {"LGG": lgg, "HGG": test_count - lgg}


def split_patients(manifest: DatasetManifest, test_count: int = 50, rng=None):
    """Stratified random split; returns ``(train_ids, test_ids)`` in manifest order."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n = len(manifest)
    if test_count < 0 or (test_count and test_count >= n):
        raise DataError(f"test_count must be in [0, {n}), got {test_count}")
    quota = grade_quota(manifest.counts_by_grade, test_count)
    chosen = set()
    for grade in GRADES:
        ids = [r.id for r in manifest if r.grade == grade]
        if quota[grade] > len(ids):
            raise DataError(f"need {quota[grade]} {grade} test patients but only {len(ids)} exist")
        if quota[grade]:
            picks = rng.choice(len(ids), size=quota[grade], replace=False)
            chosen.update(ids[i] for i in picks)
    test = [r.id for r in manifest if r.id in chosen]
    train = [r.id for r in manifest if r.id not in chosen]
    return train, test


@dataclass
class Patient:
    """A patient's normalized image stack and label volume held in memory."""

    id: str
    image: np.ndarray  # (4, D, H, W) float32 in [0, 1]
    label: np.ndarray  # (D, H, W) uint8
    grade: str = "HGG"

    @property
    def shape(self):
        return self.label.shape


def load_patient(record: PatientRecord) -> Patient:
    raw = record.load_modalities()
    label = record.load_label()
    if raw.shape[1:] != label.shape:
        raise DataError(f"patient {record.id}: label shape {label.shape} != image shape {raw.shape[1:]}")
    image = np.stack([normalize_intensity(v) for v in raw])
    return Patient(record.id, image, label, record.grade)


@dataclass
class PatchSample:
    input: np.ndarray  # (4, 25, 25, 25)
    label: np.ndarray  # (9, 9, 9)
    center: tuple
    patient_id: str


def center_bounds(shape, input_patch=INPUT_PATCH):
    """Inclusive ``(lo, hi)`` per axis for centers whose window fits inside ``shape``."""
    half = input_patch // 2
    bounds = []
    for n in shape:
        if n < input_patch:
            raise DataError(f"volume extent {n} smaller than patch {input_patch}")
        bounds.append((half, n - input_patch + half))
    return bounds


def extract_patch(patient: Patient, center, input_patch=INPUT_PATCH, output_patch=OUTPUT_PATCH):
    hi, ho = input_patch // 2, output_patch // 2
    win_in = tuple(slice(c - hi, c - hi + input_patch) for c in center)
    win_out = tuple(slice(c - ho, c - ho + output_patch) for c in center)
    return PatchSample(patient.image[(slice(None),) + win_in].copy(),
                       patient.label[win_out].copy(),
                       tuple(int(c) for c in center), patient.id)


def sample_patches(patients, count, tumor_fraction=0.5, rng=None,
                   input_patch=INPUT_PATCH, output_patch=OUTPUT_PATCH):
    """Draw ``count`` patches.

    For each sample a patient is chosen uniformly; with probability
    ``tumor_fraction`` the center is a tumor voxel (label > 0) whose window
    fits inside the volume, otherwise it is uniform over all valid centers.
    Patients without usable tumor voxels fall back to background samples.
    """
    if not 0.0 <= tumor_fraction <= 1.0:
        raise DataError(f"tumor_fraction must be in [0, 1], got {tumor_fraction}")
    if rng is None:
        rng = np.random.default_rng()
    patients = [load_patient(p) if isinstance(p, PatientRecord) else p for p in patients]
    if not patients:
        raise DataError("no patients to sample from")
    bounds = [center_bounds(p.shape, input_patch) for p in patients]
    tumor_centers = []
    for p, b in zip(patients, bounds):
        box = tuple(slice(lo, hi + 1) for lo, hi in b)
        idx = np.argwhere(p.label[box] > 0) + np.array([lo for lo, _ in b])
        tumor_centers.append(idx)
    warned = set()
    samples = []
    for _ in range(count):
        i = int(rng.integers(len(patients)))
        want_tumor = rng.random() < tumor_fraction
        if want_tumor and len(tumor_centers[i]):
            center = tumor_centers[i][rng.integers(len(tumor_centers[i]))]
        else:
            if want_tumor and i not in warned:
                log.warning("patient %s has no tumor voxels at valid centers; "
                            "using background samples", patients[i].id)
                warned.add(i)
            center = [int(rng.integers(lo, hi + 1)) for lo, hi in bounds[i]]
        samples.append(extract_patch(patients[i], center, input_patch, output_patch))
    return samples


def stack_patches(samples):
    """``(inputs (n, 4, P, P, P) float32, labels (n, p, p, p) uint8)``."""
    return (np.stack([s.input for s in samples]).astype(np.float32),
            np.stack([s.label for s in samples]).astype(np.uint8))


def _axis_tiles(n, input_patch, output_patch):
    margin = (input_patch - output_patch) // 2
    stop = n - margin
    tiles = []
    start = margin
    while start + output_patch <= stop:
        tiles.append((start - margin, start, start + output_patch))
        start += output_patch
    if start < stop:
        # Remainder: shift one window back to the volume edge, write only the uncovered part.
        last = stop - output_patch
        tiles.append((last - margin, start, stop))
    return tiles


def tile_plan(shape, input_patch=INPUT_PATCH, output_patch=OUTPUT_PATCH):
    """List of ``(input_origin, write_lo, write_hi)`` tiles, each a 3-tuple per axis.

    Output windows step by ``output_patch`` from the margin; written regions
    are disjoint and every input window lies inside the volume.
    """
    if min(shape) < input_patch:
        raise DataError(f"volume {tuple(shape)} smaller than the {input_patch}^3 input window")
    per_axis = [_axis_tiles(n, input_patch, output_patch) for n in shape]
    plan = []
    for a in per_axis[0]:
        for b in per_axis[1]:
            for c in per_axis[2]:
                plan.append(((a[0], b[0], c[0]), (a[1], b[1], c[1]), (a[2], b[2], c[2])))
    return plan


def predict_volume(net, patient, batch_size: int = 16) -> np.ndarray:
    """Segment a whole volume by tiling the network's output windows.

    ``patient`` is a :class:`Patient`, a :class:`PatientRecord` or a
    normalized ``(4, D, H, W)`` array.  Voxels in the border margin that no
    window can reach are labeled 0.
    """
    if isinstance(patient, PatientRecord):
        patient = load_patient(patient)
    image = patient.image if isinstance(patient, Patient) else np.asarray(patient, dtype=np.float32)
    spec = net.spec
    P, p = spec.input_patch, spec.output_patch
    margin = (P - p) // 2
    shape = image.shape[1:]
    plan = tile_plan(shape, P, p)
    out = np.zeros(shape, dtype=np.uint8)
    for s in range(0, len(plan), batch_size):
        chunk = plan[s:s + batch_size]
        batch = np.stack([image[(slice(None),) + tuple(slice(o, o + P) for o in origin)]
                          for origin, _, _ in chunk])
        labels = np.argmax(net.forward(batch, "eval"), axis=1).astype(np.uint8)
        for (origin, lo, hi), lab in zip(chunk, labels):
            # Offset of the write region inside this tile's output window.
            local = tuple(slice(l - o - margin, h - o - margin) for o, l, h in zip(origin, lo, hi))
            out[tuple(slice(l, h) for l, h in zip(lo, hi))] = lab[local]
    return out
