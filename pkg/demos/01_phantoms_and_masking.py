"""Tour of the volume layer: phantoms, modality masking, regions, file I/O.

Run:  python3 demos/01_phantoms_and_masking.py
"""

import tempfile
from pathlib import Path

import numpy as np

from adamm import (
    apply_modality_mask,
    derive_presence_labels,
    derive_regions,
    enumerate_combinations,
    load_volume,
    normalize_intensity,
    save_volume,
    synth_case,
)

# ----------------------------------------------------------------------------
# A phantom is a deterministic function of its seed: a brain ellipsoid with a
# nested tumor (NET core, ET rim, ED shell) and modality-dependent contrast.
# ----------------------------------------------------------------------------
vol, labels = synth_case(seed=7, size=(32, 32, 32))
print("image:", vol.data.shape, vol.data.dtype, "| labels:", labels.classes.shape)

counts = labels.classes.reshape(3, -1).sum(axis=1).astype(int)
print("lesion voxels  NET/ED/ET:", counts.tolist())

# The evaluation regions nest: ET inside TC inside WT.
regions = derive_regions(labels)
print("region voxels  WT/TC/ET:", int(regions.wt.sum()), int(regions.tc.sum()), int(regions.et.sum()))
print("presence flags:", derive_presence_labels(labels).y_cls.tolist())

# ----------------------------------------------------------------------------
# The 15 modality combinations, in report column order. Masking zero-fills the
# absent channels and never touches the present ones.
# ----------------------------------------------------------------------------
combos = enumerate_combinations()
print("\ncombination codes:", [c.code for c in combos])
print("first =", combos[0].name(), "| last =", combos[-1].name())

flair_only = combos[3]
masked = apply_modality_mask(normalize_intensity(vol), flair_only)
per_channel = np.abs(masked.data).reshape(4, -1).sum(axis=1)
print(f"\nafter masking to {flair_only.name()!r}: |channel| sums = {per_channel.round(1).tolist()}")

# ----------------------------------------------------------------------------
# Volumes round-trip bit-exactly through the .vol + .json sidecar format.
# ----------------------------------------------------------------------------
with tempfile.TemporaryDirectory() as tmp:
    path = save_volume(Path(tmp) / "demo_case", vol)
    again = load_volume(path)
    print("\nround-trip bit-exact:", again.data.tobytes() == vol.data.tobytes())
