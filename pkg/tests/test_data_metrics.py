import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from rehit.data import (DataMismatchError, DatasetManifest, ImageFormatError, ShadowConfig,
                        list_images, load_decomposition, load_image, save_image, synth_clean_image,
                        synth_dataset, synth_shadow_pair, to_bytes, write_synthetic)
from rehit.metrics import PSNR_CAP, EvalReport, EvalRow, evaluate_dir, psnr, ssim, write_csv
from rehit.retinex import apply_perturbation_model


def _write_rgb(path, arr):
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


class TestImageIO:
    def test_endpoint_mapping(self, tmp_path):
        arr = np.zeros((2, 2, 3), np.uint8)
        arr[1] = 255
        _write_rgb(tmp_path / "a.png", arr)
        img = load_image(tmp_path / "a.png")
        assert img.shape == (1, 3, 2, 2)
        assert img[0, :, 0].max() == 0.0 and img[0, :, 1].min() == 1.0

    def test_half_rounds_up(self):
        assert to_bytes(np.full((3, 1, 1), 0.5))[0, 0, 0] == 128

    def test_clamps(self):
        assert to_bytes(np.array([-1.0, 2.0, 0.2]).reshape(3, 1, 1)).ravel().tolist() == [0, 255, 51]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([".png", ".ppm"]))
    def test_save_load_byte_identical(self, tmp_path_factory, seed, suffix):
        arr = np.random.default_rng(seed).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        d = tmp_path_factory.mktemp("io")
        _write_rgb(d / f"x{suffix}", arr)
        save_image(load_image(d / f"x{suffix}"), d / f"y{suffix}")
        assert np.array_equal(np.asarray(Image.open(d / f"y{suffix}")), arr)

    def test_rejects_grayscale(self, tmp_path):
        Image.new("L", (4, 4)).save(tmp_path / "g.png")
        with pytest.raises(ImageFormatError, match="mode"):
            load_image(tmp_path / "g.png")

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ImageFormatError, match="bad.png"):
            load_image(tmp_path / "bad.png")

    def test_rejects_unknown_suffix(self, tmp_path):
        with pytest.raises(ImageFormatError):
            save_image(np.zeros((1, 3, 2, 2)), tmp_path / "x.jpg")


class TestSynthesis:
    def test_deterministic(self):
        a, b = synth_dataset(2, 32, 7), synth_dataset(2, 32, 7)
        for p, q in zip(a, b):
            assert p.i_sh.tobytes() == q.i_sh.tobytes() and p.i_gt.tobytes() == q.i_gt.tobytes()

    def test_value_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r, l = synth_clean_image(16, rng)
            assert r.min() >= 0.05 and r.max() <= 1.0
            assert l.min() >= 0.3 and l.max() <= 1.0
            assert 0.0 <= (r * l).min() and (r * l).max() <= 1.0

    def test_no_shadow(self):
        pair = synth_shadow_pair(32, np.random.default_rng(1), ShadowConfig(attenuation=0.0, reflectance_amp=0.0))
        np.testing.assert_array_equal(pair.i_sh, pair.i_gt)

    def test_shadow_darkens_masked_region(self):
        rng = np.random.default_rng(2)
        pair = synth_shadow_pair(64, rng, ShadowConfig(count=1, softness=0.0, reflectance_amp=0.0))
        mask = pair.gt_decomp.l_hat[0, 0] < 0
        assert mask.any() and (~mask).any()
        assert pair.i_sh[0, :, mask].mean() < pair.i_sh[0, :, ~mask].mean()

    def test_decomposition_reproduces_input(self):
        for pair in synth_dataset(3, 32, 4):
            np.testing.assert_array_equal(apply_perturbation_model(pair.gt_decomp), pair.i_sh)

    @pytest.mark.parametrize("kwargs", [{"attenuation": 1.0}, {"attenuation": -0.1},
                                        {"reflectance_amp": 0.2}, {"count": -1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ShadowConfig(**kwargs)

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            synth_clean_image(8, rng)


class TestManifest:
    def test_write_and_read(self, tmp_path):
        manifest = write_synthetic(synth_dataset(3, 32, 0), tmp_path)
        lines = (tmp_path / "manifest.tsv").read_bytes().split(b"\n")
        assert lines[-1] == b"" and len(lines) - 1 == 3
        assert lines[0] == b"input/0000.png\ttarget/0000.png\t0000"
        again = DatasetManifest.read(tmp_path / "manifest.tsv")
        assert again.entries == manifest.entries
        assert [p.i_sh.shape for p in again.load_pairs()] == [(1, 3, 32, 32)] * 3

    def test_reproducible_bytes(self, tmp_path):
        for d in ("a", "b"):
            write_synthetic(synth_dataset(1, 32, 9), tmp_path / d)
        for rel in ("input/0000.png", "target/0000.png", "manifest.tsv", "decomp/0000_l_hat.npy"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_sidecars_regenerate_input_bytes(self, tmp_path):
        write_synthetic(synth_dataset(2, 32, 3), tmp_path)
        for pid in ("0000", "0001"):
            regenerated = to_bytes(apply_perturbation_model(load_decomposition(tmp_path, pid)))
            assert np.array_equal(regenerated, np.asarray(Image.open(tmp_path / "input" / f"{pid}.png")))

    def test_missing_file_named(self, tmp_path):
        write_synthetic(synth_dataset(2, 32, 0), tmp_path)
        (tmp_path / "target" / "0001.png").unlink()
        with pytest.raises(DataMismatchError) as exc:
            DatasetManifest.read(tmp_path / "manifest.tsv")
        assert exc.value.ids == ["0001"]

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(DataMismatchError, match="duplicate"):
            DatasetManifest(tmp_path, [("a", "b", "x"), ("c", "d", "x")]).validate()

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\tb\n")
        with pytest.raises(DataMismatchError, match="malformed"):
            DatasetManifest.read(tmp_path / "m.tsv")


class TestPSNR:
    def test_identical_is_capped(self, rng):
        x = rng.uniform(0, 1, (1, 3, 8, 8))
        assert psnr(x, x) == PSNR_CAP == 99.0

    def test_uniform_offset(self, rng):
        x = rng.uniform(0, 0.9, (1, 3, 8, 8))
        assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_reference(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.uniform(0, 1, (3, 12, 12)), r.uniform(0, 1, (3, 12, 12))
        assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(b, a, data_range=1.0), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSSIM:
    def test_self_similarity(self, rng):
        x = rng.uniform(0, 1, (1, 3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.5, 0.5), (1.0, 0.0)])
    def test_constant_images(self, a, b):
        c1 = 0.01**2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((3, 13, 13), a), np.full((3, 13, 13), b)) == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (3, 16, 16)), rng.uniform(0, 1, (3, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_reference(self, seed):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (3, 16, 20))
        b = np.clip(a + r.uniform(0.02, 0.3) * r.standard_normal(a.shape), 0, 1)
        expected = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                         use_sample_covariance=False, channel_axis=0)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_too_small(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


class TestEvaluateDir:
    @pytest.fixture
    def dirs(self, tmp_path):
        rng = np.random.default_rng(0)
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        pred.mkdir(), gt.mkdir()
        for name in ("a", "b"):
            arr = rng.integers(0, 256, (16, 16, 3))
            _write_rgb(gt / f"{name}.png", arr)
            _write_rgb(pred / f"{name}.png", np.clip(arr + rng.integers(-20, 20, arr.shape), 0, 255))
        return pred, gt

    def test_identical_dirs(self, dirs):
        report = evaluate_dir(dirs[1], dirs[1])
        assert report.mean_psnr == 99.0 and report.mean_ssim == pytest.approx(1.0, abs=1e-9)

    def test_means_are_per_image_averages(self, dirs):
        report = evaluate_dir(*dirs)
        rows = [(psnr(load_image(dirs[0] / f"{k}.png"), load_image(dirs[1] / f"{k}.png")),
                 ssim(load_image(dirs[0] / f"{k}.png"), load_image(dirs[1] / f"{k}.png"))) for k in "ab"]
        assert report.mean_psnr == pytest.approx(np.mean([r[0] for r in rows]), abs=1e-12)
        assert report.mean_ssim == pytest.approx(np.mean([r[1] for r in rows]), abs=1e-12)
        assert "n/a" in report.table()

    def test_unmatched_names(self, dirs):
        (dirs[0] / "a.png").rename(dirs[0] / "c.png")
        with pytest.raises(DataMismatchError) as exc:
            evaluate_dir(*dirs)
        assert exc.value.ids == ["a", "c"]

    def test_dims_differ(self, dirs):
        _write_rgb(dirs[0] / "b.png", np.zeros((16, 17, 3)))
        with pytest.raises(DataMismatchError, match="b"):
            evaluate_dir(*dirs)

    def test_corrupted_file_named(self, dirs):
        (dirs[0] / "b.png").write_bytes(b"\x89PNG broken")
        with pytest.raises(ImageFormatError, match="b.png"):
            evaluate_dir(*dirs)

    def test_csv(self, tmp_path):
        write_csv(EvalReport([EvalRow("x", 20.0, 0.5)]), tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == "id,psnr_db,ssim\nx,20.000000,0.500000\n"

    def test_list_images_filters(self, tmp_path):
        (tmp_path / "notes.txt").write_text("x")
        _write_rgb(tmp_path / "a.png", np.zeros((2, 2, 3)))
        assert list(list_images(tmp_path)) == ["a"]
