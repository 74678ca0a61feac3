import numpy as np
import pytest
import torch
from PIL import Image

from adaseg.codespace import Domain
from adaseg.data import (
    DatasetManifest,
    ManifestRecord,
    ShiftLevel,
    SynthSpec,
    apply_shift,
    load_dataset,
    load_record,
    preprocess,
    read_manifest,
    render_raster,
    synthesize_dataset,
    write_manifest,
)
from adaseg.errors import ConfigError, DataError, ShapeError


def bilinear_oracle(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent half-pixel bilinear resampling (matches align_corners=False)."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * in_h / out_h - 0.5
            x = (j + 0.5) * in_w / out_w - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            dy, dx = y - y0, x - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, in_h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, in_w - 1)
            out[i, j] = (src[y0c, x0c] * (1 - dy) * (1 - dx)
                         + src[y0c, x1c] * (1 - dy) * dx
                         + src[y1c, x0c] * dy * (1 - dx)
                         + src[y1c, x1c] * dy * dx)
    return out


class TestPreprocess:
    def test_8bit_endpoints(self):
        raw = np.array([[0, 255], [128, 255]], dtype=np.uint8)
        out = preprocess(raw, 8, size=2)
        assert out[0, 0, 0] == -1.0
        assert out[0, 0, 1] == 1.0

    def test_10bit_linear_map(self):
        raw = np.full((4, 4), 512, dtype=np.uint16)
        out = preprocess(raw, 10, size=4)
        expected = 2.0 * 512 / 1023 - 1.0
        assert torch.allclose(out, torch.full((1, 4, 4), expected), atol=1e-6)

    def test_resize_matches_bilinear_oracle(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        out = preprocess(raw, 8, size=8).squeeze(0).numpy()
        expected = bilinear_oracle(raw.astype(np.float64), 8, 8)
        expected = expected * (2.0 / 255.0) - 1.0
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_idempotent_after_render_round_trip(self):
        rng = np.random.default_rng(1)
        raw = rng.integers(0, 256, size=(8, 8)).astype(np.uint8)
        img = preprocess(raw, 8, size=8)
        again = preprocess(render_raster(img, 8), 8, size=8)
        assert torch.allclose(img, again, atol=1e-6)

    def test_rejects_unknown_depth_and_bad_shape(self):
        with pytest.raises(ConfigError):
            preprocess(np.zeros((4, 4), dtype=np.uint8), 9, size=4)
        with pytest.raises(ShapeError):
            preprocess(np.zeros((4, 4, 3), dtype=np.uint8), 8, size=4)
        with pytest.raises(ShapeError):
            preprocess(np.zeros((0, 4), dtype=np.uint8), 8, size=4)


class TestShift:
    def test_levels_carry_the_declared_parameters(self):
        assert (ShiftLevel.WEAK.scale_range, ShiftLevel.WEAK.noise_std) == (0.30, 0.5)
        assert (ShiftLevel.HARSH.scale_range, ShiftLevel.HARSH.noise_std) == (0.60, 1.0)
        assert (ShiftLevel.NONE.scale_range, ShiftLevel.NONE.noise_std) == (0.0, 0.0)
        assert ShiftLevel.from_str("weak") is ShiftLevel.WEAK
        with pytest.raises(ConfigError):
            ShiftLevel.from_str("medium")

    def test_none_is_bitwise_identity(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 16, 16, generator=g) * 2 - 1
        assert apply_shift(x, ShiftLevel.NONE, g) is x

    def test_weak_factors_recoverable_within_bounds(self):
        # mean != 0, values small enough that nothing clamps
        base = torch.linspace(-0.3, 0.1, 64).reshape(1, 8, 8)
        g = torch.Generator().manual_seed(7)
        for _ in range(200):
            out = apply_shift(base, ShiftLevel.WEAK, g, noise=False)
            beta = float(out.std(unbiased=False) / base.std(unbiased=False))
            alpha = float(out.mean() / base.mean())
            assert 0.7 - 1e-5 <= beta <= 1.3 + 1e-5
            assert 0.7 - 1e-4 <= alpha <= 1.3 + 1e-4

    def test_harsh_noise_std_on_zero_image(self):
        # constant-0 image: the unclamped output is pure Gaussian noise
        x = torch.zeros(1, 64, 64)
        g = torch.Generator().manual_seed(3)
        stds = [float(apply_shift(x, ShiftLevel.HARSH, g, clamp=False)
                      .std(unbiased=False)) for _ in range(20)]
        assert abs(np.mean(stds) - 1.0) < 0.02

    def test_clamped_output_in_range(self):
        g = torch.Generator().manual_seed(5)
        x = torch.rand(1, 32, 32, generator=g) * 2 - 1
        out = apply_shift(x, ShiftLevel.HARSH, g)
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestSynthesize:
    def test_bitwise_deterministic(self, tmp_path):
        spec = SynthSpec(size=32, n_intra=(3, 1, 1), n_inter=(3, 1, 1), seed=3)
        synthesize_dataset(spec, tmp_path / "a")
        synthesize_dataset(spec, tmp_path / "b")
        for sub in ("images", "masks"):
            for pa in sorted((tmp_path / "a" / sub).iterdir()):
                pb = tmp_path / "b" / sub / pa.name
                assert pa.read_bytes() == pb.read_bytes()

    def test_mask_fraction_within_geometric_bounds(self, tiny_dataset):
        spec, _, _, eval_m = tiny_dataset
        lo = 2 * np.pi * spec.lung_half_width[0] * spec.lung_half_height[0] * 0.85
        hi = 2 * np.pi * spec.lung_half_width[1] * spec.lung_half_height[1] * 1.15
        for rec in eval_m.records:
            mask = np.asarray(Image.open(rec.mask_path)) > 0
            frac = mask.mean()
            assert lo <= frac <= hi

    def test_inter_interior_brighter_by_at_least_offset(self, tiny_dataset):
        spec, _, _, eval_m = tiny_dataset
        means = {"intra": [], "inter": []}
        for rec in eval_m.records:
            img = np.asarray(Image.open(rec.image_path)) / 255.0
            mask = np.asarray(Image.open(rec.mask_path)) > 0
            means[rec.domain.value].append(img[mask].mean())
        assert np.mean(means["inter"]) >= np.mean(means["intra"]) + spec.inter_offset

    def test_training_manifest_withholds_inter_train_masks(self, tiny_dataset):
        _, _, train_m, eval_m = tiny_dataset
        for rec in train_m.records:
            if rec.domain is Domain.INTER and rec.split == "train":
                assert rec.mask_path is None
            else:
                assert rec.mask_path is not None
        assert all(r.mask_path is not None for r in eval_m.records)

    def test_degenerate_geometry_raises(self, tmp_path):
        spec = SynthSpec(size=16, lung_half_width=(0.6, 0.7), retry_cap=5,
                         n_intra=(1, 0, 0), n_inter=(0, 0, 0))
        with pytest.raises(DataError):
            synthesize_dataset(spec, tmp_path / "bad")


class TestManifestAndLoading:
    def test_round_trip(self, tmp_path, tiny_dataset):
        _, _, train_m, _ = tiny_dataset
        path = tmp_path / "m.txt"
        write_manifest(train_m, path)
        back = read_manifest(path)
        assert back.depth == train_m.depth
        assert len(back.records) == len(train_m.records)
        assert back.records[0] == train_m.records[0]

    def test_missing_file_names_the_record(self, tmp_path):
        rec = ManifestRecord(tmp_path / "nope.png", None, Domain.INTRA, "train")
        with pytest.raises(DataError, match="nope"):
            load_record(rec, 8, 32)

    def test_shuffle_order_repeats_under_epoch_reseeding(self, tiny_dataset):
        _, _, train_m, _ = tiny_dataset
        sub = DatasetManifest(train_m.records[:3], train_m.depth)
        first = [img.sum() for img, _ in load_dataset(sub, 64, seed=5)]
        second = [img.sum() for img, _ in load_dataset(sub, 64, seed=5)]
        assert first == second

    def test_masks_one_hot(self, tiny_dataset):
        _, _, _, eval_m = tiny_dataset
        labeled = [r for r in eval_m.records if r.mask_path is not None]
        img, mask = load_record(labeled[0], eval_m.depth, 64)
        assert mask.shape == (2, 64, 64)
        assert torch.all(mask.sum(dim=0) == 1.0)
        assert img.min() >= -1 and img.max() <= 1

    def test_16bit_record_matches_standalone_preprocess(self, tmp_path):
        rng = np.random.default_rng(4)
        raw = rng.integers(0, 2 ** 16, size=(32, 32)).astype(np.uint16)
        path = tmp_path / "img16.png"
        Image.fromarray(raw).save(path)
        rec = ManifestRecord(path, None, Domain.INTER, "train")
        img, _ = load_record(rec, 16, 16)
        expected = preprocess(raw, 16, 16)
        assert torch.equal(img, expected)
        assert img.min() >= -1 and img.max() <= 1

    def test_registry_blind_label_guarantee(self, tiny_registry):
        assert not hasattr(tiny_registry.inter_train, "masks")
        assert hasattr(tiny_registry.intra_train, "masks")
        assert len(tiny_registry.inter_val.masks) == len(tiny_registry.inter_val.images)
