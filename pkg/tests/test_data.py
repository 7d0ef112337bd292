import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualspike import data
from dualspike.idx import IdxFormatError, read_idx, write_idx


class TestIdx:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, (2, 5, 5)).astype(np.uint8)
        path = tmp_path / "two.idx"
        write_idx(path, arr)
        assert np.array_equal(read_idx(path), arr)

    def test_zero_items(self, tmp_path):
        path = tmp_path / "empty.idx"
        write_idx(path, np.zeros((0, 3, 3), dtype=np.uint8))
        assert read_idx(path).shape == (0, 3, 3)

    def test_pixel_scaling_endpoints(self, tmp_path):
        img = np.array([[[0, 255]]], dtype=np.uint8)  # one 1x2 image
        write_idx(tmp_path / "img.idx", img)
        write_idx(tmp_path / "lbl.idx", np.array([1], dtype=np.uint8))
        ds = data.load_idx_images(tmp_path / "img.idx", tmp_path / "lbl.idx", n_classes=2)
        assert ds.images[0, 0, 0, 0] == 0.0
        assert ds.images[0, 0, 0, 1] == 1.0

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x01\x00\x08\x01" + b"\x00" * 8)
        with pytest.raises(IdxFormatError, match="byte 0"):
            read_idx(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.idx"
        write_idx(path, np.zeros((2, 3), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(IdxFormatError, match="mismatch"):
            read_idx(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        path = tmp_path / "float.idx"
        path.write_bytes(b"\x00\x00\x0d\x01" + b"\x00\x00\x00\x01" + b"\x00" * 4)
        with pytest.raises(IdxFormatError, match="dtype"):
            read_idx(path)

    def test_event_round_trip(self, tmp_path):
        ev = data.synth_events(2, 3, T=4, density=0.5, seed=1, size=8)
        write_idx(tmp_path / "ev.idx", ev.frames.astype(np.uint8))
        write_idx(tmp_path / "lb.idx", ev.labels.astype(np.uint8))
        back = data.load_idx_events(tmp_path / "ev.idx", tmp_path / "lb.idx")
        assert np.array_equal(back.frames, ev.frames)
        assert np.array_equal(back.labels, ev.labels)


class TestSyntheticImages:
    def test_deterministic_per_seed(self):
        a = data.synth_dataset("blobs", 3, 5, seed=4)
        b = data.synth_dataset("blobs", 3, 5, seed=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_counts(self):
        ds = data.synth_dataset("blobs", 3, 10, seed=0)
        assert len(ds) == 30
        assert all((ds.labels == c).sum() == 10 for c in range(3))

    def test_pixels_in_unit_interval(self):
        for kind in ("blobs", "bars"):
            ds = data.synth_dataset(kind, 4, 8, seed=2)
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_linear_separability_oracle(self):
        # blobs should be nearly linearly separable: one ridge-regression pass
        train = data.synth_dataset("blobs", 3, 200, seed=7)
        test = data.synth_dataset("blobs", 3, 50, seed=8)
        x = train.images.reshape(len(train), -1).astype(np.float64)
        onehot = np.eye(3)[train.labels]
        w = np.linalg.lstsq(
            x.T @ x + 1e-3 * np.eye(x.shape[1]), x.T @ onehot, rcond=None)[0]
        preds = (test.images.reshape(len(test), -1) @ w).argmax(axis=1)
        assert (preds == test.labels).mean() > 0.8

    def test_normalization_round_trip(self):
        ds = data.synth_dataset("blobs", 3, 20, seed=9)
        x = ds.images[:5]
        assert np.allclose(ds.denormalize(ds.normalize(x)), x, atol=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError, match="class"):
            data.synth_dataset("blobs", 1, 5, seed=0)


class TestSyntheticEvents:
    def test_values_are_binary(self):
        ev = data.synth_events(3, 4, T=4, density=0.5, seed=3)
        assert set(np.unique(ev.frames)).issubset({0.0, 1.0})

    def test_density_zero_limit(self):
        ev = data.synth_events(2, 3, T=4, density=1e-9, seed=3)
        assert ev.frames.sum() == 0.0

    def test_deterministic(self):
        a = data.synth_events(2, 4, T=3, density=0.4, seed=5)
        b = data.synth_events(2, 4, T=3, density=0.4, seed=5)
        assert np.array_equal(a.frames, b.frames)

    def test_density_controls_fill(self):
        lo = data.synth_events(2, 20, T=4, density=0.2, seed=6)
        hi = data.synth_events(2, 20, T=4, density=0.8, seed=6)
        assert hi.frames.sum() > lo.frames.sum()

    def test_density_bounds(self):
        with pytest.raises(ValueError, match="density"):
            data.synth_events(2, 2, T=2, density=1.5, seed=0)


class TestPartition:
    def test_size_formula(self):
        labels = np.repeat(np.arange(5), 200)  # 1000 samples
        part = data.partition(labels, y_target=0, ratio=0.03, seed=1)
        assert len(part.poison) == 30

    def test_zero_ratio(self):
        labels = np.repeat(np.arange(4), 25)
        part = data.partition(labels, y_target=2, ratio=0.0, seed=1)
        assert len(part.poison) == 0
        assert len(part.clean_target) == 25

    def test_infeasible_ratio_reports_max(self):
        labels = np.repeat(np.arange(4), 25)
        with pytest.raises(data.PartitionError, match="max feasible"):
            data.partition(labels, y_target=0, ratio=0.5, seed=1)

    def test_round_half_up(self):
        labels = np.repeat(np.arange(2), 25)  # 50 samples; 0.05*50 = 2.5 -> 3
        part = data.partition(labels, y_target=0, ratio=0.05, seed=1)
        assert len(part.poison) == 3

    @settings(max_examples=60, deadline=None)
    @given(
        class_sizes=st.lists(st.integers(3, 40), min_size=2, max_size=6),
        ratio=st.floats(0.0, 0.08),
        seed=st.integers(0, 2**31),
        target=st.integers(0, 5),
    )
    def test_invariants_hold_for_all_seeds(self, class_sizes, ratio, seed, target):
        target = target % len(class_sizes)
        labels = np.concatenate([np.full(n, c) for c, n in enumerate(class_sizes)])
        n_poison = int(np.floor(ratio * len(labels) + 0.5))
        if n_poison > class_sizes[target]:
            with pytest.raises(data.PartitionError):
                data.partition(labels, target, ratio, seed)
            return
        part = data.partition(labels, target, ratio, seed)
        part.validate(labels)  # disjoint, covering, label-consistent
        assert len(part.poison) == n_poison


class TestBaselinePoison:
    def test_blend_zero_ratio_identity(self):
        x = np.random.default_rng(1).random((2, 1, 6, 6), dtype=np.float32)
        out = data.baseline_poison(x, "blended", blend_ratio=0.0)
        assert np.allclose(out, x)

    def test_blend_full_ratio_is_pattern(self):
        x = np.random.default_rng(2).random((1, 6, 6), dtype=np.float32)
        pattern = np.random.default_rng(3).random((1, 6, 6), dtype=np.float32)
        out = data.baseline_poison(x, "blended", blend_ratio=1.0, pattern=pattern)
        assert np.allclose(out, pattern)

    def test_patch_pixel_count(self):
        x = np.zeros((1, 8, 8), dtype=np.float32)
        out = data.baseline_poison(x, "badnet_patch", patch_size=3)
        assert out.sum() == 9.0
        assert np.all(out[0, 5:, 5:] == 1.0)

    def test_patch_must_fit(self):
        with pytest.raises(ValueError, match="fit"):
            data.baseline_poison(np.zeros((1, 2, 2), dtype=np.float32), "badnet_patch",
                                 patch_size=3)

    def test_dataset_poisoning_relabels(self):
        ds = data.synth_dataset("blobs", 3, 20, seed=11)
        poisoned = data.poison_dataset_baseline(ds, "badnet_patch", 0.1, y_target=1, seed=12)
        changed = np.flatnonzero((poisoned.images != ds.images).any(axis=(1, 2, 3)))
        assert len(changed) == 6  # round(0.1 * 60)
        assert np.all(poisoned.labels[changed] == 1)
        untouched = np.setdiff1d(np.arange(60), changed)
        assert np.array_equal(poisoned.labels[untouched], ds.labels[untouched])
