import json
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionseg.data import (DatasetManifest, PatientRecord, generate_synthetic, load_checkpoint,
                            load_volume, normalize_intensity, predict_volume, sample_patches,
                            save_checkpoint, split_patients, store_volume)
from fusionseg.data.checkpoint import read_checkpoint
from fusionseg.data import patches
from fusionseg.data.patches import Patient, center_bounds, tile_plan
from fusionseg.data.volume import MODALITIES, PayloadSizeError
from fusionseg.errors import (CheckpointError, DataError, HeaderValidationError,
                              MagicMismatchError, TruncatedPayloadError)
from fusionseg.fusion import FusionSpec
from fusionseg.model import ArchitectureSpec, build


def tiny(fusion=None):
    return ArchitectureSpec.preset("tiny", fusion=fusion)


class TestVolumeFormat:
    def test_round_trip_f32(self, tmp_path):
        v = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        store_volume(tmp_path / "a", v)
        out, header = load_volume(tmp_path / "a")
        assert out.dtype == np.float32 and header["dtype"] == "f32"
        assert out.tobytes() == v.tobytes()

    def test_round_trip_u8_4d(self, tmp_path):
        v = np.random.default_rng(1).integers(0, 5, (2, 3, 4, 5)).astype(np.uint8)
        store_volume(tmp_path / "lab", v)
        out, header = load_volume(tmp_path / "lab.vvol.json")
        np.testing.assert_array_equal(out, v)
        assert header == {"magic": "VVOL1", "dtype": "u8", "shape": [2, 3, 4, 5], "order": "row-major"}

    def test_byte_layout(self, tmp_path):
        store_volume(tmp_path / "x", np.arange(6, dtype=np.float32).reshape(1, 2, 3))
        raw = (tmp_path / "x.vvol.bin").read_bytes()
        assert raw == struct.pack("<6f", 0, 1, 2, 3, 4, 5)

    def test_truncated(self, tmp_path):
        store_volume(tmp_path / "a", np.ones((2, 3, 4), np.float32))
        p = tmp_path / "a.vvol.bin"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(TruncatedPayloadError):
            load_volume(tmp_path / "a")

    def test_payload_too_long(self, tmp_path):
        store_volume(tmp_path / "a", np.ones((2, 3, 4), np.float32))
        p = tmp_path / "a.vvol.bin"
        p.write_bytes(p.read_bytes() + b"\0\0\0\0")
        with pytest.raises(PayloadSizeError):
            load_volume(tmp_path / "a")

    def _rewrite_header(self, tmp_path, **changes):
        store_volume(tmp_path / "a", np.ones((2, 3, 4), np.float32))
        hp = tmp_path / "a.vvol.json"
        header = json.loads(hp.read_text())
        header.update(changes)
        hp.write_text(json.dumps(header))

    def test_bad_magic(self, tmp_path):
        self._rewrite_header(tmp_path, magic="NIFTI")
        with pytest.raises(MagicMismatchError):
            load_volume(tmp_path / "a")

    @pytest.mark.parametrize("changes", [dict(shape=[0, 3, 4]), dict(shape=[2, 3]),
                                         dict(dtype="f64"), dict(order="column-major")])
    def test_header_validation(self, tmp_path, changes):
        self._rewrite_header(tmp_path, **changes)
        with pytest.raises(HeaderValidationError):
            load_volume(tmp_path / "a")

    def test_errors_are_distinct(self):
        kinds = {MagicMismatchError, TruncatedPayloadError, HeaderValidationError, PayloadSizeError}
        assert len(kinds) == 4 and all(issubclass(k, DataError) for k in kinds)


class TestNormalize:
    def test_midpoint(self):
        out = normalize_intensity(np.array([10.0, 60.0, 110.0]))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
        assert out.dtype == np.float32

    def test_unit_range_unchanged(self):
        v = np.array([0.0, 0.25, 1.0], np.float32)
        np.testing.assert_array_equal(normalize_intensity(v), v)

    def test_constant_volume(self):
        assert not np.any(normalize_intensity(np.full((3, 3, 3), 7.0)))

    def test_non_finite(self):
        with pytest.raises(DataError):
            normalize_intensity(np.array([1.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 16), a=st.floats(1e-2, 1e3), b=st.floats(-1e3, 1e3))
    def test_affine_invariance(self, seed, a, b):
        v = np.random.default_rng(seed).standard_normal((4, 4, 4)) * 100
        out = normalize_intensity(v)
        assert out.min() >= 0 and out.max() <= 1
        np.testing.assert_allclose(normalize_intensity(a * v + b), out, atol=1e-6)


def fake_manifest(n_lgg, n_hgg):
    records = []
    for i in range(n_lgg + n_hgg):
        grade = "LGG" if i < n_lgg else "HGG"
        records.append(PatientRecord(f"P{i:03d}", grade, {m: f"{m}" for m in MODALITIES}, "label"))
    return DatasetManifest(records)


class TestSplit:
    def test_stratified_counts(self):
        m = fake_manifest(54, 220)
        train, test = split_patients(m, 50, np.random.default_rng(0))
        grades = {r.id: r.grade for r in m}
        assert sum(grades[i] == "LGG" for i in test) == 10
        assert sum(grades[i] == "HGG" for i in test) == 40
        assert set(train) | set(test) == set(grades) and not set(train) & set(test)

    def test_deterministic(self):
        m = fake_manifest(54, 220)
        a = split_patients(m, 50, np.random.default_rng(3))
        b = split_patients(m, 50, np.random.default_rng(3))
        c = split_patients(m, 50, np.random.default_rng(4))
        assert a == b and a != c

    def test_zero_test_count(self):
        m = fake_manifest(3, 9)
        train, test = split_patients(m, 0, np.random.default_rng(0))
        assert test == [] and len(train) == 12

    def test_half_up_rounding(self):
        # 3 of 12 are LGG: 4 * 3 / 12 = 1 LGG; 2 * 3 / 12 = 0.5 rounds up to 1.
        _, test = split_patients(fake_manifest(3, 9), 2, np.random.default_rng(0))
        assert sum(t < "P003" for t in test) == 1

    @pytest.mark.parametrize("count", [-1, 12, 13])
    def test_test_count_range(self, count):
        with pytest.raises(DataError):
            split_patients(fake_manifest(3, 9), count, np.random.default_rng(0))


def toy_patient(shape=(25, 25, 25), seed=0, tumor=True):
    rng = np.random.default_rng(seed)
    label = np.zeros(shape, np.uint8)
    if tumor:
        label[10:15, 11:16, 9:14] = rng.integers(1, 5, (5, 5, 5))
    image = rng.random((4,) + shape).astype(np.float32)
    return Patient("toy", image, label)


class TestSampling:
    def test_single_center(self):
        assert center_bounds((25, 25, 25)) == [(12, 12), (12, 12), (12, 12)]
        samples = sample_patches([toy_patient()], 5, 0.0, np.random.default_rng(0))
        assert all(s.center == (12, 12, 12) for s in samples)

    def test_too_small(self):
        with pytest.raises(DataError):
            center_bounds((24, 30, 30))

    def test_all_tumor_centers(self, patients):
        for s in sample_patches(patients, 50, 1.0, np.random.default_rng(1)):
            assert s.label[4, 4, 4] > 0

    def test_tumor_fraction(self, monkeypatch):
        # One tumor voxel in a 60^3 volume: uniform draws hit it with odds 36^-3.
        label = np.zeros((60, 60, 60), np.uint8)
        label[30, 30, 30] = 2
        p = Patient("one", np.zeros((4, 60, 60, 60), np.float32), label)
        monkeypatch.setattr(patches, "extract_patch", lambda patient, center, *a: tuple(center))
        centers = sample_patches([p], 10 ** 4, 0.5, np.random.default_rng(2))
        frac = np.mean([c == (30, 30, 30) for c in centers])
        assert 0.48 <= frac <= 0.52

    def test_window_invariant(self, patients):
        by_id = {p.id: p for p in patients}
        for s in sample_patches(patients, 30, 0.5, np.random.default_rng(3)):
            p = by_id[s.patient_id]
            c = s.center
            assert s.input.shape == (4, 25, 25, 25) and s.label.shape == (9, 9, 9)
            np.testing.assert_array_equal(s.label, p.label[c[0] - 4:c[0] + 5, c[1] - 4:c[1] + 5, c[2] - 4:c[2] + 5])
            np.testing.assert_array_equal(
                s.input, p.image[:, c[0] - 12:c[0] + 13, c[1] - 12:c[1] + 13, c[2] - 12:c[2] + 13])
            assert 0 <= s.input.min() and s.input.max() <= 1

    def test_no_tumor_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            samples = sample_patches([toy_patient(tumor=False)], 4, 1.0, np.random.default_rng(0))
        assert len(samples) == 4 and "no tumor" in caplog.text

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            sample_patches([toy_patient()], 1, 1.5, np.random.default_rng(0))


class TestTiling:
    @staticmethod
    def coverage(shape):
        hits = np.zeros(shape, int)
        for origin, lo, hi in tile_plan(shape):
            assert all(o >= 0 and o + 25 <= n for o, n in zip(origin, shape))
            assert all(o + 8 <= l and h <= o + 17 for o, l, h in zip(origin, lo, hi))
            hits[tuple(slice(a, b) for a, b in zip(lo, hi))] += 1
        return hits

    def test_single_tile(self):
        assert len(tile_plan((25, 25, 25))) == 1

    def test_34_cube(self):
        assert len(tile_plan((34, 34, 34))) == 8
        hits = self.coverage((34, 34, 34))
        assert np.all(hits[8:26, 8:26, 8:26] == 1)
        assert hits.sum() == 18 ** 3

    @settings(max_examples=40, deadline=None)
    @given(shape=st.tuples(st.integers(25, 60), st.integers(25, 60), st.integers(25, 60)))
    def test_disjoint_interior_cover(self, shape):
        hits = self.coverage(shape)
        interior = tuple(slice(8, n - 8) for n in shape)
        assert np.all(hits[interior] == 1)
        assert hits.sum() == np.prod([n - 16 for n in shape])

    def test_predict_margin_and_shape(self):
        net = build(tiny(), np.random.default_rng(0))
        out = predict_volume(net, toy_patient((25, 27, 30)))
        assert out.shape == (25, 27, 30) and out.dtype == np.uint8
        mask = np.ones(out.shape, bool)
        mask[8:-8, 8:-8, 8:-8] = False
        assert not np.any(out[mask])

    def test_constant_background_logits(self):
        net = build(tiny(), np.random.default_rng(0))
        for p in net.parameters():
            p.value[...] = 0
        net.registry["classifier/b"].value[0] = 1.0
        assert not np.any(predict_volume(net, toy_patient((34, 34, 34))))

    def test_predict_matches_patchwise_forward(self):
        net = build(tiny(FusionSpec("early", "sum")), np.random.default_rng(0))
        p = toy_patient((34, 30, 25), seed=2)
        out = predict_volume(net, p, batch_size=3)
        for origin, lo, hi in tile_plan(p.shape):
            x = p.image[(slice(None),) + tuple(slice(o, o + 25) for o in origin)][None]
            lab = np.argmax(net.forward(x, "eval")[0], axis=0)
            local = tuple(slice(l - o - 8, h - o - 8) for o, l, h in zip(origin, lo, hi))
            np.testing.assert_array_equal(out[tuple(slice(l, h) for l, h in zip(lo, hi))], lab[local])

    def test_too_small_volume(self):
        with pytest.raises(DataError):
            predict_volume(build(tiny()), toy_patient((25, 25, 25)).image[:, :24])


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        generate_synthetic(tmp_path / "a", 2, (30, 30, 30), seed=7)
        generate_synthetic(tmp_path / "b", 2, (30, 30, 30), seed=7)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 2 * 10 + 1
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_all_classes_present(self, synthetic, patients):
        assert synthetic.records[0].shape == (40, 40, 40)
        for p in patients:
            assert set(np.unique(p.label)) == {0, 1, 2, 3, 4}

    def test_modalities_distinct(self, patients):
        for p in patients:
            for i in range(4):
                for j in range(i + 1, 4):
                    assert np.max(np.abs(p.image[i] - p.image[j])) > 0.05

    def test_no_single_modality_separates_classes(self):
        from fusionseg.data.synthetic import CONTRAST
        for row in CONTRAST:
            assert len(set(np.round(row, 6))) < 5

    def test_manifest_round_trip(self, synthetic, tmp_path):
        loaded = DatasetManifest.load(synthetic.records[0].label_path.parent.parent / "manifest.jsonl")
        assert [r.id for r in loaded] == [r.id for r in synthetic]
        assert sum(loaded.counts_by_grade.values()) == 4

    def test_manifest_missing(self, tmp_path):
        with pytest.raises(DataError):
            DatasetManifest.load(tmp_path / "nope.jsonl")

    def test_shape_too_small(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, 1, (24, 30, 30))


class TestCheckpoint:
    @pytest.mark.parametrize("fusion", [None, FusionSpec("middle", "conv")], ids=str)
    def test_round_trip_bit_exact(self, tmp_path, fusion):
        net = build(tiny(fusion), np.random.default_rng(0))
        save_checkpoint(net, tmp_path / "n.ckpt", {"epoch": 3})
        back = load_checkpoint(tmp_path / "n.ckpt", tiny(fusion))
        assert back.meta == {"epoch": 3} and back.spec == net.spec
        x = np.random.default_rng(1).random((2, 4, 25, 25, 25))
        assert net.forward(x, "eval").tobytes() == back.forward(x, "eval").tobytes()

    def test_header_layout(self, tmp_path):
        net = build(tiny(), np.random.default_rng(0))
        path = save_checkpoint(net, tmp_path / "n.ckpt")
        raw = path.read_bytes()
        assert raw[:8] == b"FSCKPT1\n"
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        assert [t["name"] for t in header["tensors"]] == list(net.registry)
        header2, tensors = read_checkpoint(path)
        assert header2 == header and set(tensors) == set(net.registry)

    def test_truncated_tensor(self, tmp_path):
        path = save_checkpoint(build(tiny()), tmp_path / "n.ckpt")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_tampered_length(self, tmp_path):
        path = save_checkpoint(build(tiny()), tmp_path / "n.ckpt")
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        header["tensors"][0]["nbytes"] -= 4
        body = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(raw[:8] + struct.pack("<Q", len(body)) + body + raw[16 + hlen:])
        with pytest.raises(CheckpointError, match="conv1-1/w"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_spec_mismatch_names_layer(self, tmp_path):
        path = save_checkpoint(build(tiny(FusionSpec("late", "max"))), tmp_path / "n.ckpt")
        with pytest.raises(CheckpointError, match="stream0/conv1-1"):
            load_checkpoint(path, tiny())
        with pytest.raises(CheckpointError, match="fusion"):
            load_checkpoint(path, tiny(FusionSpec("late", "conv")))
