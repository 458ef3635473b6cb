"""Synthetic multi-contrast tumor phantoms.

Each patient is an ellipsoidal "brain" holding an ellipsoidal tumor made of
four concentric shells (classes 1, 3, 4, 2 from the inside out).  The four
modalities render the same label map through different per-class contrast
tables.  Every table maps at least one tumor class to the background
intensity, so no single contrast isolates all classes or even the whole
tumor; the full stack of four does.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..rng import stream
from .volume import MODALITIES, DatasetManifest, PatientRecord, store_volume

# Rows: t1, t1c, t2, flair.  Columns: class 0 (healthy) .. 4.
CONTRAST = np.array([
    [0.50, 0.20, 0.50, 0.20, 0.50],
    [0.40, 0.40, 0.40, 0.40, 0.90],
    [0.30, 0.90, 0.70, 0.70, 0.30],
    [0.30, 0.30, 0.80, 0.55, 0.80],
])
AIR = 0.05
# Raw scanner-like units: raw = gain * intensity + offset.
GAIN = (800.0, 1200.0, 1500.0, 600.0)
OFFSET = (100.0, 50.0, 0.0, 200.0)
NOISE = 0.04

# Normalized-radius boundaries: r < 0.3 -> 1, < 0.55 -> 3, < 0.8 -> 4, <= 1 -> 2.
SHELLS = ((0.30, 1), (0.55, 3), (0.80, 4), (1.00, 2))

# Tumor semi-axis as a fraction of the smallest extent; grade follows volume.
LGG_RADIUS = (0.14, 0.16)
HGG_RADIUS = (0.21, 0.25)
GRADE_RADIUS = 0.182
AXIS_JITTER = 0.10


def phantom_labels(shape, center, semi_axes) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi_axes)))
    label = np.zeros(shape, dtype=np.uint8)
    for bound, cls in reversed(SHELLS):
        label[r <= bound] = cls
    return label


def brain_mask(shape) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    c = [(n - 1) / 2 for n in shape]
    r = np.sqrt(sum(((g - ci) / (0.45 * n)) ** 2 for g, ci, n in zip(grid, c, shape)))
    return r <= 1.0


def render_modalities(label, brain, rng) -> np.ndarray:
    """Raw ``(4, D, H, W)`` float32 intensities for one label map."""
    shape = label.shape
    grid = np.indices(shape, dtype=np.float64)
    out = np.empty((4,) + shape, dtype=np.float32)
    for m in range(4):
        clean = np.where(brain, CONTRAST[m][label], AIR)
        # Low-frequency tissue texture.
        k = rng.uniform(0.1, 0.3, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        texture = sum(np.sin(ki * g + ph) for ki, g, ph in zip(k, grid, phase)) / 3
        clean = clean + 0.03 * texture * brain
        clean = gaussian_filter(clean, sigma=0.6)
        noisy = clean + rng.normal(0.0, NOISE, size=shape)
        out[m] = GAIN[m] * noisy + OFFSET[m]
    return out


def make_patient(shape, index, rng):
    """Return ``(modalities, label, grade)`` for patient ``index``."""
    s = min(shape)
    band = LGG_RADIUS if index % 5 == 0 else HGG_RADIUS
    base = rng.uniform(*band) * s
    semi = base * (1 + rng.uniform(-AXIS_JITTER, AXIS_JITTER, size=3))
    center = [int(round((n - 1) / 2 + rng.uniform(-0.06, 0.06) * n)) for n in shape]
    label = phantom_labels(shape, center, semi)
    threshold = 4 / 3 * np.pi * (GRADE_RADIUS * s) ** 3
    grade = "HGG" if np.count_nonzero(label) > threshold else "LGG"
    images = render_modalities(label, brain_mask(shape), rng)
    return images, label, grade


def generate_synthetic(out_dir, n_patients, shape=(48, 48, 48), seed=0) -> DatasetManifest:
    """Write ``n_patients`` phantoms plus ``manifest.jsonl`` under ``out_dir``."""
    if isinstance(shape, int):
        shape = (shape,) * 3
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 25:
        raise ValueError(f"phantom shape must be three extents >= 25, got {shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "synth")
    records = []
    for i in range(n_patients):
        pid = f"P{i:03d}"
        images, label, grade = make_patient(shape, i, rng)
        paths = {}
        for m, name in enumerate(MODALITIES):
            base = out_dir / pid / name
            store_volume(base, images[m])
            paths[name] = base
        store_volume(out_dir / pid / "label", label)
        records.append(PatientRecord(pid, grade, paths, out_dir / pid / "label", shape))
    manifest = DatasetManifest(records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
