"""Dataset handling: file I/O, patches, augmentation, splits, synthetic data."""

from .io import read_image, read_mask, read_raw, write_image, write_mask, write_raw
from .manifest import (DatasetManifest, ManifestEntry, build_manifest, write_synth_dataset)
from .patches import (AugmentParams, LabeledPatch, apply_augment, augment, extract_patches,
                      one_hot_mask, sample_augment_params)
from .synth import synth_generate, synth_image

__all__ = [
    "read_image", "read_mask", "read_raw", "write_image", "write_mask", "write_raw",
    "DatasetManifest", "ManifestEntry", "build_manifest", "write_synth_dataset",
    "AugmentParams", "LabeledPatch", "apply_augment", "augment", "extract_patches",
    "one_hot_mask", "sample_augment_params", "synth_generate", "synth_image",
]
