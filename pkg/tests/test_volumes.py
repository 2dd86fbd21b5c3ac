import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamm.volumes import (
    MIN_SYNTH_SIZE,
    PHANTOM_GEOMETRY,
    VOL_MAGIC,
    LabelVolume,
    ModalityCombination,
    MultiModalVolume,
    VolumeFormatError,
    ZeroVarianceError,
    apply_modality_mask,
    derive_presence_labels,
    derive_regions,
    enumerate_combinations,
    load_volume,
    normalize_intensity,
    save_volume,
    synth_case,
)

from oracles import mask_coords


def random_volume(rng, size=(8, 8, 8)):
    return MultiModalVolume(rng.normal(size=(4,) + size).astype(np.float32))


class TestCombinations:
    def test_order_and_codes(self):
        codes = [c.code for c in enumerate_combinations()]
        # Singles, pairs, triples, full; first column is T2-only which under
        # the [T1, T1Gd, T2, FLAIR] digit convention reads "0010".
        assert codes[0] == "0010"
        assert codes[-1] == "1111"
        assert len(codes) == 15
        assert len(set(codes)) == 15

    def test_empty_excluded_and_exhaustive(self):
        codes = {c.code for c in enumerate_combinations()}
        assert "0000" not in codes
        assert {int(c, 2) for c in codes} == set(range(1, 16))

    def test_code_round_trip(self):
        for combo in enumerate_combinations():
            assert ModalityCombination.from_code(combo.code).present == combo.present

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ModalityCombination.from_code("0000")

    def test_single_counts(self):
        sizes = [sum(c.present) for c in enumerate_combinations()]
        assert sizes == [1] * 4 + [2] * 6 + [3] * 4 + [4]


class TestModalityMask:
    def test_full_is_identity(self, rng):
        vol = random_volume(rng)
        masked = apply_modality_mask(vol, ModalityCombination.from_code("1111"))
        assert np.array_equal(masked.data, vol.data)

    def test_t1_only(self, rng):
        vol = random_volume(rng)
        masked = apply_modality_mask(vol, ModalityCombination.from_code("1000"))
        assert np.array_equal(masked.data[0], vol.data[0])
        assert np.abs(masked.data[1:]).sum() == 0.0

    @given(code=st.integers(min_value=1, max_value=15), seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_masked_channels_zero_and_idempotent(self, code, seed):
        vol = random_volume(np.random.default_rng(seed), size=(4, 4, 4))
        combo = ModalityCombination.from_code(format(code, "04b"))
        masked = apply_modality_mask(vol, combo)
        for ch, present in enumerate(combo.present):
            if present:
                assert np.array_equal(masked.data[ch], vol.data[ch])
            else:
                assert np.abs(masked.data[ch]).sum() == 0.0
        twice = apply_modality_mask(masked, combo)
        assert np.array_equal(twice.data, masked.data)


class TestRegions:
    def test_all_zero(self):
        labels = LabelVolume(np.zeros((3, 4, 4, 4), dtype=np.float32))
        regions = derive_regions(labels)
        assert not regions.wt.any() and not regions.tc.any() and not regions.et.any()

    def test_single_et_voxel(self):
        classes = np.zeros((3, 4, 4, 4), dtype=np.float32)
        classes[2, 1, 2, 3] = 1.0
        regions = derive_regions(LabelVolume(classes))
        for mask in (regions.wt, regions.tc, regions.et):
            assert mask[1, 2, 3] and mask.sum() == 1

    def test_union_oracle_and_nesting(self, rng):
        for _ in range(10):
            classes = (rng.random((3, 5, 5, 5)) > 0.6).astype(np.float32)
            regions = derive_regions(LabelVolume(classes))
            net, ed, et = (mask_coords(classes[i]) for i in range(3))
            assert mask_coords(regions.wt) == net | ed | et
            assert mask_coords(regions.tc) == net | et
            assert mask_coords(regions.et) == et
            assert mask_coords(regions.et) <= mask_coords(regions.tc) <= mask_coords(regions.wt)


class TestPresenceLabels:
    def test_all_zero(self):
        labels = LabelVolume(np.zeros((3, 4, 4, 4), dtype=np.float32))
        assert derive_presence_labels(labels).y_cls.tolist() == [False, False, False]

    def test_one_ed_voxel(self):
        classes = np.zeros((3, 4, 4, 4), dtype=np.float32)
        classes[1, 0, 0, 0] = 1.0
        assert derive_presence_labels(LabelVolume(classes)).y_cls.tolist() == [False, True, False]

    def test_linear_scan_oracle(self, rng):
        for _ in range(10):
            classes = (rng.random((3, 4, 4, 4)) > 0.9).astype(np.float32)
            got = derive_presence_labels(LabelVolume(classes)).y_cls
            want = [any(v > 0 for v in classes[i].reshape(-1)) for i in range(3)]
            assert got.tolist() == want


class TestNormalize:
    def test_zero_channel_pass_through(self, rng):
        data = rng.normal(size=(4, 6, 6, 6)).astype(np.float32)
        data[2] = 0.0
        out = normalize_intensity(MultiModalVolume(data))
        assert np.array_equal(out.data[2], np.zeros_like(data[2]))

    def test_moments(self, rng):
        vol = random_volume(rng, size=(10, 10, 10))
        out = normalize_intensity(vol)
        for ch in range(4):
            mask = vol.data[ch] != 0
            values = out.data[ch][mask]
            assert abs(values.mean()) < 1e-4
            assert abs(values.std() - 1.0) < 1e-4

    def test_affine_invariance(self, rng):
        base = rng.normal(size=(4, 6, 6, 6)).astype(np.float32) + 5.0  # no zeros
        vol = MultiModalVolume(base)
        shifted = MultiModalVolume(2.5 * base + 1.75)
        a = normalize_intensity(vol).data
        b = normalize_intensity(shifted).data
        assert np.allclose(a, b, atol=1e-5)

    def test_zero_variance_error(self):
        data = np.zeros((4, 4, 4, 4), dtype=np.float32)
        data[0] = 0.5
        with pytest.raises(ZeroVarianceError):
            normalize_intensity(MultiModalVolume(data))


class TestSynthCase:
    def test_deterministic(self):
        a_vol, a_lab = synth_case(42, (16, 16, 16))
        b_vol, b_lab = synth_case(42, (16, 16, 16))
        assert np.array_equal(a_vol.data, b_vol.data)
        assert np.array_equal(a_lab.classes, b_lab.classes)

    def test_seeds_differ(self):
        a_vol, _ = synth_case(1, (16, 16, 16))
        b_vol, _ = synth_case(2, (16, 16, 16))
        assert not np.array_equal(a_vol.data, b_vol.data)

    def test_region_nesting(self):
        for seed in range(5):
            _, labels = synth_case(seed, (20, 20, 20))
            regions = derive_regions(labels)
            assert (regions.et <= regions.tc).all()
            assert (regions.tc <= regions.wt).all()

    def test_channels_disjoint_and_all_present(self):
        _, labels = synth_case(3, (24, 24, 24))
        assert (labels.classes.sum(axis=0) <= 1.0).all()
        assert derive_presence_labels(labels).y_cls.all()

    def test_et_count_within_geometry_bounds(self):
        # ET shell volume bounds from the configured radius fractions, padded
        # by a 2x margin for voxelization error.
        size = 32
        net_lo, net_hi = (f * size for f in PHANTOM_GEOMETRY["net_radius"])
        th_lo, th_hi = (f * size for f in PHANTOM_GEOMETRY["et_thickness"])
        an_lo, an_hi = PHANTOM_GEOMETRY["anisotropy"]
        vol = lambda r: 4.0 / 3.0 * np.pi * r**3
        lo = (vol(net_lo + th_lo) - vol(net_hi)) * an_lo**3 / 2.0
        hi = (vol(net_hi + th_hi) - vol(net_lo)) * an_hi**3 * 2.0
        for seed in range(8):
            _, labels = synth_case(seed, (size, size, size))
            count = int(labels.classes[2].sum())
            assert lo <= count <= hi, (seed, count, lo, hi)

    def test_size_validation(self):
        with pytest.raises(ValueError):
            synth_case(0, (MIN_SYNTH_SIZE - 1, 16, 16))


class TestVolumeIO:
    def test_round_trip_image(self, rng, tmp_path):
        vol = random_volume(rng)
        vol = MultiModalVolume(vol.data, spacing=(1.0, 0.5, 2.0))
        path = save_volume(tmp_path / "case", vol)
        loaded = load_volume(path)
        assert isinstance(loaded, MultiModalVolume)
        assert loaded.data.tobytes() == vol.data.tobytes()
        assert loaded.spacing == vol.spacing

    def test_round_trip_label(self, rng, tmp_path):
        labels = LabelVolume((rng.random((3, 4, 4, 4)) > 0.5).astype(np.float32))
        load = load_volume(save_volume(tmp_path / "lbl", labels))
        assert isinstance(load, LabelVolume)
        assert np.array_equal(load.classes, labels.classes)

    def test_truncated_payload(self, tmp_path):
        sidecar = {"magic": "ADAMM1", "shape": [4, 8, 8, 8], "dtype": "f32",
                   "kind": "image", "spacing": [1, 1, 1]}
        (tmp_path / "bad.json").write_text(json.dumps(sidecar))
        payload = np.zeros(2047, dtype="<f4").tobytes()  # one float short
        (tmp_path / "bad.vol").write_bytes(VOL_MAGIC + struct.pack("<H", 1) + payload)
        with pytest.raises(VolumeFormatError, match="size"):
            load_volume(tmp_path / "bad.vol")

    def test_big_endian_writer_rejected(self, rng, tmp_path):
        vol = random_volume(rng, size=(4, 4, 4))
        sidecar = {"magic": "ADAMM1", "shape": [4, 4, 4, 4], "dtype": "f32",
                   "kind": "image", "spacing": [1, 1, 1]}
        (tmp_path / "be.json").write_text(json.dumps(sidecar))
        # Simulate a byte-swapped writer: big-endian order tag and payload.
        payload = np.ascontiguousarray(vol.data, dtype=">f4").tobytes()
        (tmp_path / "be.vol").write_bytes(VOL_MAGIC + struct.pack(">H", 1) + payload)
        with pytest.raises(VolumeFormatError, match="byte-order"):
            load_volume(tmp_path / "be.vol")

    def test_bad_magic(self, rng, tmp_path):
        vol = random_volume(rng, size=(4, 4, 4))
        path = save_volume(tmp_path / "ok", vol)
        raw = path.read_bytes()
        path.write_bytes(b"NOTMAG" + raw[6:])
        with pytest.raises(VolumeFormatError, match="magic"):
            load_volume(path)

    def test_sidecar_shape_mismatch(self, rng, tmp_path):
        path = save_volume(tmp_path / "case", random_volume(rng, size=(4, 4, 4)))
        sidecar = json.loads(path.with_suffix(".json").read_text())
        sidecar["shape"] = [4, 8, 4, 4]
        path.with_suffix(".json").write_text(json.dumps(sidecar))
        with pytest.raises(VolumeFormatError):
            load_volume(path)
