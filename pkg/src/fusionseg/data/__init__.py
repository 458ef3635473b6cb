"""Volume I/O, dataset preparation, synthetic phantoms and checkpoints."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .patches import (INPUT_PATCH, OUTPUT_PATCH, Patient, PatchSample, center_bounds,
                      extract_patch, load_patient, normalize_intensity, predict_volume,
                      sample_patches, split_patients, stack_patches, tile_plan)
from .synthetic import generate_synthetic
from .volume import (MODALITIES, DatasetManifest, PatientRecord, load_volume, read_header,
                     store_volume)

__all__ = [
    "INPUT_PATCH", "OUTPUT_PATCH", "MODALITIES",
    "DatasetManifest", "PatientRecord", "Patient", "PatchSample",
    "load_volume", "store_volume", "read_header",
    "normalize_intensity", "split_patients", "load_patient", "center_bounds", "extract_patch",
    "sample_patches", "stack_patches", "tile_plan", "predict_volume",
    "generate_synthetic", "save_checkpoint", "load_checkpoint", "read_checkpoint",
]
