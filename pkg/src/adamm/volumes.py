"""Multi-modal volume domain types, modality masking, and phantom generation.

Conventions: channel-first arrays, float32. Image volumes are (4, D, H, W)
with channels ordered [T1, T1Gd, T2, FLAIR]; label volumes are (3, D, H, W)
with channels ordered [NET, ED, ET]. Background voxels are exactly zero, and
intensity statistics are always taken over nonzero voxels only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

MODALITY_NAMES = ("T1", "T1Gd", "T2", "FLAIR")
LESION_NAMES = ("NET", "ED", "ET")

VOL_MAGIC = b"ADAMM1"
# Little-endian byte-order probe appended to the magic; a byte-swapped writer
# produces 0x0100 here and is rejected on load.
VOL_BYTE_ORDER_TAG = 1
VOL_HEADER_SIZE = 8

MIN_SYNTH_SIZE = 16

# Phantom geometry, as fractions of the smallest volume axis. The nested
# ellipsoids share one anisotropy, so NET < TC < ED nesting is exact.
PHANTOM_GEOMETRY = {
    "net_radius": (0.08, 0.11),
    "et_thickness": (0.045, 0.065),
    "ed_thickness": (0.09, 0.13),
    "anisotropy": (0.85, 1.2),
    "brain_radius": (0.38, 0.45),
}


class VolumeFormatError(ValueError):
    """Raised when a volume file or its sidecar is malformed."""


class ZeroVarianceError(ValueError):
    """Raised when a nonzero channel has no intensity spread to normalize."""


@dataclass
class MultiModalVolume:
    """A 4-channel scalar field with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(MODALITY_NAMES):
            raise ValueError(f"expected (4, D, H, W) data, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ModalityCombination:
    """Presence mask over the four modalities, in [T1, T1Gd, T2, FLAIR] order."""

    present: tuple

    def __post_init__(self):
        present = tuple(bool(p) for p in self.present)
        if len(present) != 4:
            raise ValueError("expected 4 presence flags")
        if not any(present):
            raise ValueError("at least one modality must be present")
        object.__setattr__(self, "present", present)

    @classmethod
    def from_code(cls, code: str) -> "ModalityCombination":
        if len(code) != 4 or set(code) - {"0", "1"}:
            raise ValueError(f"bad combination code {code!r}")
        return cls(tuple(c == "1" for c in code))

    @property
    def code(self) -> str:
        return "".join("1" if p else "0" for p in self.present)

    @property
    def is_full(self) -> bool:
        return all(self.present)

    def name(self) -> str:
        return "+".join(m for m, p in zip(MODALITY_NAMES, self.present) if p)


# Column order of the standard missing-modality results table:
# singles, then pairs, then triples, then the full combination.
_COMBINATION_CODES = (
    "0010",  # T2
    "0100",  # T1Gd
    "1000",  # T1
    "0001",  # FLAIR
    "0110",  # T1Gd+T2
    "1100",  # T1+T1Gd
    "1001",  # T1+FLAIR
    "1010",  # T1+T2
    "0011",  # T2+FLAIR
    "0101",  # T1Gd+FLAIR
    "1101",  # T1+T1Gd+FLAIR
    "1011",  # T1+T2+FLAIR
    "0111",  # T1Gd+T2+FLAIR
    "1110",  # T1+T1Gd+T2
    "1111",  # full
)


def enumerate_combinations():
    """All 15 non-empty modality combinations in report column order."""
    return [ModalityCombination.from_code(c) for c in _COMBINATION_CODES]


@dataclass
class LabelVolume:
    """Binary lesion channels (NET, ED, ET), shape (3, D, H, W)."""

    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.float32)
        if self.classes.ndim != 4 or self.classes.shape[0] != len(LESION_NAMES):
            raise ValueError(f"expected (3, D, H, W) labels, got {self.classes.shape}")
        bad = (self.classes != 0.0) & (self.classes != 1.0)
        if bad.any():
            raise ValueError("label values must be 0 or 1")

    @property
    def shape(self):
        return self.classes.shape


@dataclass
class RegionMasks:
    """Nested evaluation regions: et is a subset of tc, tc a subset of wt."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


@dataclass
class PresenceLabels:
    """Per-lesion existence flags (NET, ED, ET), shape (3,) bool."""

    y_cls: np.ndarray

    def __post_init__(self):
        self.y_cls = np.asarray(self.y_cls, dtype=bool).reshape(3)


def apply_modality_mask(vol: MultiModalVolume, combo: ModalityCombination) -> MultiModalVolume:
    """Zero-fill the channels that are absent in ``combo``.

    Present channels are copied bit-identically.
    """
    data = vol.data.copy()
    for ch, present in enumerate(combo.present):
        if not present:
            data[ch] = 0.0
    return MultiModalVolume(data, vol.spacing)


def derive_regions(labels: LabelVolume) -> RegionMasks:
    """Build WT/TC/ET masks: wt = NET|ED|ET, tc = NET|ET, et = ET."""
    net = labels.classes[0] > 0
    ed = labels.classes[1] > 0
    et = labels.classes[2] > 0
    return RegionMasks(wt=net | ed | et, tc=net | et, et=et)


def derive_presence_labels(labels: LabelVolume) -> PresenceLabels:
    """One flag per lesion channel: does the channel contain any voxel?"""
    return PresenceLabels(labels.classes.reshape(3, -1).max(axis=1) > 0)


def normalize_intensity(vol: MultiModalVolume) -> MultiModalVolume:
    """Standardize each channel to zero mean / unit std over its nonzero voxels.

    All-zero channels pass through untouched. A channel with nonzero content
    but zero variance cannot be standardized and raises ZeroVarianceError.
    """
    out = vol.data.copy()
    for ch in range(out.shape[0]):
        mask = out[ch] != 0.0
        if not mask.any():
            continue
        values = out[ch][mask].astype(np.float64)
        std = values.std()
        if std == 0.0:
            raise ZeroVarianceError(f"channel {MODALITY_NAMES[ch]} has constant nonzero intensity")
        out[ch][mask] = ((values - values.mean()) / std).astype(np.float32)
    return MultiModalVolume(out, vol.spacing)


def _smooth_field(rng: np.random.Generator, size, amplitude: float) -> np.ndarray:
    """Low-frequency multiplicative gain field from an interpolated coarse grid."""
    coarse = rng.normal(0.0, 1.0, size=(5, 5, 5))
    grids = np.meshgrid(
        *[np.linspace(0.0, 4.0, n) for n in size], indexing="ij"
    )
    smooth = map_coordinates(coarse, np.stack([g.ravel() for g in grids]), order=1)
    smooth = smooth.reshape(size)
    peak = np.abs(smooth).max()
    if peak > 0:
        smooth = smooth / peak
    return 1.0 + amplitude * smooth


# Mean intensity of [tissue, NET, ET, ED] per modality channel. ED is bright
# in FLAIR/T2, the ET rim is bright under contrast (T1Gd), the necrotic NET
# core is dark on T1-weighted channels.
_PHANTOM_CONTRAST = {
    "T1": (1.0, 0.45, 0.95, 0.75),
    "T1Gd": (1.0, 0.35, 1.9, 0.9),
    "T2": (1.0, 1.4, 1.2, 1.6),
    "FLAIR": (1.0, 1.25, 1.2, 1.9),
}
_PHANTOM_NOISE_STD = 0.05
_PHANTOM_GAIN_AMPLITUDE = 0.08


def synth_case(seed: int, size, spacing=(1.0, 1.0, 1.0)):
    """Generate one deterministic phantom: nested-ellipsoid tumor in a brain.

    Geometry: an ED shell encloses the tumor core, whose outer rim is ET and
    inner part NET; the three label channels are disjoint by construction.

    Args:
        seed: RNG seed; equal seeds give bit-identical cases.
        size: (D, H, W), each at least 16.

    Returns:
        (MultiModalVolume, LabelVolume) pair.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < MIN_SYNTH_SIZE for s in size):
        raise ValueError(f"size must be at least {MIN_SYNTH_SIZE} per axis, got {size}")
    rng = np.random.default_rng(seed)
    geom = PHANTOM_GEOMETRY
    min_dim = min(size)

    center = np.array(size, dtype=np.float64) / 2.0
    brain_radii = np.array(
        [s * rng.uniform(*geom["brain_radius"]) for s in size]
    )
    net_r = rng.uniform(*geom["net_radius"]) * min_dim
    tc_r = net_r + rng.uniform(*geom["et_thickness"]) * min_dim
    ed_r = tc_r + rng.uniform(*geom["ed_thickness"]) * min_dim
    aniso = rng.uniform(*geom["anisotropy"], size=3)

    # Tumor center offset keeps the whole ED shell inside the brain.
    max_offset = np.maximum(brain_radii - ed_r * aniso.max() - 2.0, 0.0)
    tumor_center = center + rng.uniform(-1.0, 1.0, size=3) * max_offset * 0.5

    coords = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij")
    )
    brain_dist = np.sqrt(
        sum(((coords[i] - center[i]) / brain_radii[i]) ** 2 for i in range(3))
    )
    brain = brain_dist <= 1.0
    tumor_dist = np.sqrt(
        sum(((coords[i] - tumor_center[i]) / aniso[i]) ** 2 for i in range(3))
    )

    net = tumor_dist <= net_r
    et = (tumor_dist > net_r) & (tumor_dist <= tc_r)
    ed = (tumor_dist > tc_r) & (tumor_dist <= ed_r)
    # Clip to the brain so masked-background voxels stay exactly zero.
    net &= brain
    et &= brain
    ed &= brain
    labels = LabelVolume(np.stack([net, ed, et]).astype(np.float32))

    data = np.zeros((4,) + size, dtype=np.float32)
    for ch, modality in enumerate(MODALITY_NAMES):
        tissue_v, net_v, et_v, ed_v = _PHANTOM_CONTRAST[modality]
        channel = np.zeros(size, dtype=np.float64)
        channel[brain] = tissue_v
        channel[ed] = ed_v
        channel[net] = net_v
        channel[et] = et_v
        channel *= _smooth_field(rng, size, _PHANTOM_GAIN_AMPLITUDE)
        noise = rng.normal(0.0, _PHANTOM_NOISE_STD, size=size)
        channel[brain] += noise[brain]
        # Keep brain voxels strictly positive so the nonzero-voxel mask is stable.
        channel[brain] = np.maximum(channel[brain], 0.05)
        data[ch] = channel.astype(np.float32)

    return MultiModalVolume(data, spacing), labels


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _coerce_path(path) -> Path:
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    return path


def save_volume(path, obj) -> Path:
    """Write ``<name>.vol`` (raw little-endian float32) plus its JSON sidecar."""
    path = _coerce_path(path)
    if isinstance(obj, MultiModalVolume):
        kind, data, spacing = "image", obj.data, obj.spacing
    elif isinstance(obj, LabelVolume):
        kind, data, spacing = "label", obj.classes, (1.0, 1.0, 1.0)
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC + struct.pack("<H", VOL_BYTE_ORDER_TAG))
        fh.write(payload.tobytes())
    sidecar = {
        "magic": VOL_MAGIC.decode(),
        "shape": list(data.shape),
        "dtype": "f32",
        "kind": kind,
        "spacing": list(spacing),
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh)
    return path


def load_volume(path):
    """Load a volume pair written by :func:`save_volume`.

    Returns a MultiModalVolume or LabelVolume depending on the sidecar kind.
    Raises VolumeFormatError on magic, byte-order, shape, or size mismatches.
    """
    path = _coerce_path(path)
    try:
        with open(_sidecar_path(path)) as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"unreadable sidecar for {path}: {exc}") from exc
    if sidecar.get("magic") != VOL_MAGIC.decode():
        raise VolumeFormatError(f"sidecar magic mismatch in {_sidecar_path(path)}")
    if sidecar.get("dtype") != "f32":
        raise VolumeFormatError(f"unsupported dtype {sidecar.get('dtype')!r}")
    kind = sidecar.get("kind")
    if kind not in ("image", "label"):
        raise VolumeFormatError(f"unknown kind {kind!r}")
    shape = tuple(int(s) for s in sidecar["shape"])

    raw = Path(path).read_bytes()
    if len(raw) < VOL_HEADER_SIZE or raw[: len(VOL_MAGIC)] != VOL_MAGIC:
        raise VolumeFormatError(f"bad payload magic in {path}")
    (order_tag,) = struct.unpack("<H", raw[len(VOL_MAGIC) : VOL_HEADER_SIZE])
    if order_tag != VOL_BYTE_ORDER_TAG:
        raise VolumeFormatError(f"byte-order mismatch in {path} (wrong-endian writer?)")
    expected = int(np.prod(shape)) * 4
    body = raw[VOL_HEADER_SIZE:]
    if len(body) != expected:
        raise VolumeFormatError(
            f"payload size {len(body)} does not match shape {shape} ({expected} bytes)"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(shape).copy()

    if kind == "image":
        return MultiModalVolume(data, tuple(sidecar.get("spacing", (1.0, 1.0, 1.0))))
    return LabelVolume(data)
