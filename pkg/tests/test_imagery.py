import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from alnmil.errors import ImageDecodeError, UnsupportedFormatError
from alnmil.imagery import (Patch, filter_patches, load_image, load_mask, read_manifest, resize_bilinear,
                            resize_normalize, save_png, shannon_entropy, tile_slide, to_grayscale, write_manifest)
from alnmil.synth import SynthConfig, make_slide


def _entropy_oracle(gray):
    # direct definition, independent of the bincount path
    values, counts = np.unique(gray, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


class TestLoad:
    def test_two_pixel_png(self, tmp_path):
        path = tmp_path / "a.png"
        Image.fromarray(np.array([[[0, 0, 0], [255, 255, 255]]], dtype=np.uint8)).save(path)
        img = load_image(path)
        assert img.shape == (1, 2, 3)
        assert img.ravel().tolist() == [0, 0, 0, 255, 255, 255]

    def test_rgba_drops_alpha(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(4, 5, 4), dtype=np.uint8)
        path = tmp_path / "a.png"
        Image.fromarray(px, "RGBA").save(path)
        np.testing.assert_array_equal(load_image(path), px[..., :3])

    def test_tiff_roundtrip(self, tmp_path):
        px = np.random.default_rng(1).integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
        path = tmp_path / "a.tif"
        Image.fromarray(px).save(path)
        np.testing.assert_array_equal(load_image(path), px)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.png"
        save_png(path, np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8))
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(ImageDecodeError):
            load_image(path)

    def test_unsupported(self, tmp_path):
        path = tmp_path / "a.png"
        path.write_bytes(b"not an image at all")
        with pytest.raises(UnsupportedFormatError):
            load_image(path)

    def test_synthetic_512_roundtrip(self, tmp_path):
        img, _, _ = make_slide(np.random.default_rng(3), SynthConfig(slide_size=512, tile_size=64), True)
        save_png(tmp_path / "s.png", img)
        back = load_image(tmp_path / "s.png")
        assert back.shape == (512, 512, 3)
        np.testing.assert_array_equal(back, img)

    def test_mask_threshold(self, tmp_path):
        path = tmp_path / "m.png"
        save_png(path, np.array([[0, 127, 128, 255]], dtype=np.uint8))
        assert load_mask(path).tolist() == [[False, False, True, True]]


class TestTiling:
    def test_grid(self):
        ps = tile_slide(np.zeros((512, 512, 3), np.uint8), "s", 256, 256)
        assert [(p.x, p.y) for p in ps] == [(0, 0), (256, 0), (0, 256), (256, 256)]

    def test_partial_discarded(self):
        ps = tile_slide(np.zeros((300, 300, 3), np.uint8), "s", 256, 256)
        assert [(p.x, p.y) for p in ps] == [(0, 0)]

    def test_mask_quadrant(self):
        mask = np.zeros((512, 512), bool)
        mask[:256, :256] = True
        ps = tile_slide(np.zeros((512, 512, 3), np.uint8), "s", 256, 256, mask, 0.5)
        # brute force: every grid cell's coverage
        expected = [(x, y) for y in (0, 256) for x in (0, 256) if mask[y:y + 256, x:x + 256].mean() >= 0.5]
        assert [(p.x, p.y) for p in ps] == expected == [(0, 0)]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12))
    def test_count_and_disjoint(self, h, w, t):
        ps = tile_slide(np.zeros((h, w, 3), np.uint8), "s", t)
        assert len(ps) == (h // t) * (w // t)
        cover = np.zeros((h, w), int)
        for p in ps:
            cover[p.y:p.y + t, p.x:p.x + t] += 1
        assert cover.max(initial=0) <= 1


class TestGrayEntropy:
    def test_luma_points(self):
        px = np.array([[[255, 255, 255], [0, 0, 0], [255, 0, 0]]], dtype=np.uint8)
        assert to_grayscale(px).tolist() == [[255, 0, 76]]

    def test_luma_per_pixel(self):
        px = np.random.default_rng(0).integers(0, 256, (9, 9, 3), dtype=np.uint8)
        g = to_grayscale(px)
        perm = np.random.default_rng(1).permutation(81)
        flat = px.reshape(81, 1, 3)[perm]
        np.testing.assert_array_equal(to_grayscale(flat).ravel(), g.ravel()[perm])

    def test_constant_zero(self):
        assert shannon_entropy(np.full((8, 8, 3), 77, np.uint8)) == 0.0

    def test_two_levels(self):
        px = np.zeros((4, 4, 3), np.uint8)
        px[:2] = 255
        assert shannon_entropy(px) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_256(self):
        g = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert abs(shannon_entropy(np.repeat(g[..., None], 3, -1)) - 8.0) < 1e-9

    def test_against_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            px = rng.integers(0, rng.integers(2, 256), (16, 16, 3), dtype=np.uint8)
            assert shannon_entropy(px) == pytest.approx(_entropy_oracle(to_grayscale(px)), abs=1e-12)


class TestFilter:
    def _p(self, h):
        return Patch("s", 0, 0, np.zeros((1, 1, 3), np.uint8), h)

    def test_threshold(self):
        kept = filter_patches([self._p(0.0), self._p(6.2)], 5.0)
        assert [p.entropy_bits for p in kept] == [6.2]

    def test_zero_threshold_identity(self):
        ps = [self._p(0.0), self._p(3.0)]
        assert filter_patches(ps, 0.0) == ps

    def test_noise_vs_constant(self):
        rng = np.random.default_rng(0)
        noise = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(100)]
        const = [np.full((32, 32, 3), v, np.uint8) for v in rng.integers(0, 256, 10)]
        ps = [Patch("s", i, 0, px, shannon_entropy(px)) for i, px in enumerate(noise + const)]
        kept = filter_patches(ps, 1.0)
        assert [p.x for p in kept] == list(range(100))

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        ps = [self._p(h) for h in rng.uniform(0, 8, 50)]
        once = filter_patches(ps, 4.0)
        assert filter_patches(once, 4.0) == once

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            filter_patches([], 9.0)


class TestResize:
    def test_normalize_white(self):
        out = resize_normalize(np.full((8, 8, 3), 255, np.uint8), 4)
        assert out.shape == (3, 4, 4)
        assert np.all(out == 1.0)

    def test_identity_resize(self):
        px = np.random.default_rng(0).integers(0, 256, (16, 16, 3)).astype(np.float64)
        np.testing.assert_array_equal(resize_bilinear(px, 16, 16), px)

    def test_checkerboard_center(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
        out = resize_bilinear(board, 3, 3)
        assert out[1, 1, 0] == pytest.approx(board.mean())


def test_manifest_roundtrip(tmp_path):
    ps = [Patch("s1", 0, 32, np.zeros((1, 1, 3), np.uint8), 5.1234567), Patch("s1", 32, 32, np.zeros((1, 1, 3), np.uint8), 0.0)]
    path = tmp_path / "m.csv"
    write_manifest(path, [(ps[0], True), (ps[1], False)])
    text = path.read_bytes().decode()
    assert text == "slide_id,x,y,entropy_bits,kept\ns1,0,32,5.123457,1\ns1,32,32,0.000000,0\n"
    assert read_manifest(path)[0] == {"slide_id": "s1", "x": 0, "y": 32, "entropy_bits": 5.123457, "kept": True}
    assert os.path.getsize(path) == len(text)
