import math

import numpy as np
import pytest
from PIL import Image as PILImage

from subjectkit.image import (
    EmptyMaskError,
    ImageBuffer,
    Kernel,
    Mask,
    decay_blur,
    decode_png,
    distance_transform,
    encode_png,
    gaussian_blur,
    gaussian_kernel,
    read_png,
    ssim,
    to_luma,
    write_png,
)


def conv2d_oracle(plane: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Direct 2D clamp-padded correlation, written with explicit loops."""
    h, w = plane.shape
    size = weights.shape[0]
    half = size // 2
    out = np.zeros_like(plane, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-half, half + 1):
                for dx in range(-half, half + 1):
                    sy = min(max(y + dy, 0), h - 1)
                    sx = min(max(x + dx, 0), w - 1)
                    acc += float(weights[dy + half, dx + half]) * float(plane[sy, sx])
            out[y, x] = acc
    return out


def edt_oracle(binary: np.ndarray) -> np.ndarray:
    """Brute-force nearest-source scan over all pixel pairs."""
    h, w = binary.shape
    sources = np.argwhere(binary)
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            best = min((y - sy) ** 2 + (x - sx) ** 2 for sy, sx in sources)
            out[y, x] = best
    return np.sqrt(out).astype(np.float32)


class TestGaussianKernel:
    def test_size_one_is_identity_weight(self):
        k = gaussian_kernel(1, 5.0)
        assert np.array_equal(k.weights, [[1.0]])

    def test_size3_sigma100_matches_formula(self):
        # unnormalized center = 1/(2 pi 1e4); all 9 samples nearly equal
        k = gaussian_kernel(3, 100.0)
        center_unnormalized = 1.0 / (2.0 * math.pi * 100.0 ** 2)
        assert center_unnormalized == pytest.approx(1.59155e-5, rel=1e-4)
        # direct substitution: center / sum of the 9 sampled values
        total = sum(
            math.exp(-(x * x + y * y) / (2.0 * 100.0 ** 2))
            for x in (-1, 0, 1) for y in (-1, 0, 1)
        )
        assert k.weights[1, 1] == pytest.approx(1.0 / total, abs=1e-9)
        # near-flat: within 1e-5 of the uniform 1/9 weight
        assert k.weights[1, 1] == pytest.approx(1.0 / 9.0, abs=1e-5)

    def test_paper_scale_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel(151, 100.0)
        assert abs(float(k.weights.sum(dtype=np.float64)) - 1.0) <= 1e-6
        assert np.array_equal(k.weights, k.weights[::-1, ::-1])
        assert np.array_equal(k.weights, k.weights.T)

    @pytest.mark.parametrize("size,sigma", [(2, 1.0), (0, 1.0), (-3, 1.0),
                                            (3, 0.0), (3, -1.0)])
    def test_invalid_parameters(self, size, sigma):
        with pytest.raises(ValueError):
            gaussian_kernel(size, sigma)

    def test_kernel_type_rejects_unnormalized_weights(self):
        with pytest.raises(ValueError):
            Kernel(size=3, sigma=1.0, weights=np.ones((3, 3), dtype=np.float32))


class TestGaussianBlur:
    def test_constant_image_unchanged(self):
        img = ImageBuffer(np.full((12, 10), 0.375, dtype=np.float32))
        out = gaussian_blur(img, gaussian_kernel(5, 1.3))
        assert np.abs(out.data - img.data).max() <= 1e-7

    def test_size_one_kernel_is_identity(self, rng):
        img = ImageBuffer(rng.random((9, 9, 3)).astype(np.float32))
        out = gaussian_blur(img, gaussian_kernel(1, 2.0))
        assert np.array_equal(out.data, img.data)

    def test_separable_matches_direct_2d_oracle(self, rng):
        img = ImageBuffer(rng.random((16, 16)).astype(np.float32))
        kernel = gaussian_kernel(5, 1.0)
        out = gaussian_blur(img, kernel)
        expected = conv2d_oracle(img.data[:, :, 0].astype(np.float64),
                                 kernel.weights.astype(np.float64))
        assert np.abs(out.data[:, :, 0] - expected).max() <= 1e-6

    def test_preserves_global_mean_within_tolerance(self, rng):
        # interior-dominated: 3 px clamp band around a 128 px image
        img = ImageBuffer(rng.random((128, 128)).astype(np.float32))
        out = gaussian_blur(img, gaussian_kernel(7, 1.5))
        assert abs(float(out.data.mean()) - float(img.data.mean())) <= 1e-4

    def test_deterministic_across_runs(self, rng):
        img = ImageBuffer(rng.random((20, 20, 3)).astype(np.float32))
        kernel = gaussian_kernel(9, 2.0)
        a = gaussian_blur(img, kernel)
        b = gaussian_blur(img, kernel)
        assert np.array_equal(a.data, b.data)


class TestDistanceTransform:
    def test_single_source_corner(self):
        mask = np.zeros((3, 3), dtype=np.float32)
        mask[0, 0] = 1.0
        dist = distance_transform(Mask(mask))
        assert dist[0, 0] == 0.0
        assert dist[2, 2] == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-6)

    def test_all_ones_gives_zeros(self):
        dist = distance_transform(Mask(np.ones((5, 7), dtype=np.float32)))
        assert np.array_equal(dist, np.zeros((5, 7), dtype=np.float32))

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            distance_transform(Mask(np.zeros((4, 4), dtype=np.float32)))

    def test_matches_brute_force_exactly(self, rng):
        for _ in range(25):
            binary = rng.random((12, 12)) < 0.15
            if not binary.any():
                binary[0, 0] = True
            dist = distance_transform(Mask(binary.astype(np.float32)))
            assert np.array_equal(dist, edt_oracle(binary))

    def test_non_square_shapes(self, rng):
        binary = rng.random((5, 17)) < 0.1
        binary[2, 9] = True
        dist = distance_transform(Mask(binary.astype(np.float32)))
        assert np.array_equal(dist, edt_oracle(binary))

    def test_one_lipschitz(self, rng):
        binary = rng.random((8, 8)) < 0.2
        binary[4, 4] = True
        dist = distance_transform(Mask(binary.astype(np.float32))).astype(np.float64)
        h, w = dist.shape
        coords = [(y, x) for y in range(h) for x in range(w)]
        for y0, x0 in coords:
            for y1, x1 in coords:
                gap = math.hypot(y1 - y0, x1 - x0)
                assert abs(dist[y0, x0] - dist[y1, x1]) <= gap + 1e-6

    def test_zero_exactly_on_sources(self, rng):
        binary = rng.random((10, 10)) < 0.3
        binary[0, 0] = True
        dist = distance_transform(Mask(binary.astype(np.float32)))
        assert (dist[binary] == 0.0).all()
        assert (dist[~binary] > 0.0).all()

    def test_threshold_respected(self):
        data = np.array([[0.4, 0.6], [0.2, 0.9]], dtype=np.float32)
        dist = distance_transform(Mask(data, threshold=0.5))
        assert dist[0, 1] == 0.0 and dist[1, 1] == 0.0
        assert dist[0, 0] > 0.0


def central_mask(h, w, size):
    data = np.zeros((h, w), dtype=np.float32)
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    data[y0:y0 + size, x0:x0 + size] = 1.0
    return Mask(data)


class TestDecayBlur:
    def test_inside_mask_equals_plain_blur(self, rng):
        img = ImageBuffer(rng.random((32, 32, 3)).astype(np.float32))
        mask = central_mask(32, 32, 8)
        kernel = gaussian_kernel(9, 3.0)
        out = decay_blur(img, mask, kernel, lam=5.0)
        blurred = gaussian_blur(img, kernel)
        inside = mask.binary()
        assert np.array_equal(out.data[inside], blurred.data[inside])

    def test_lambda_zero_degenerates_to_uniform_blur(self, rng):
        img = ImageBuffer(rng.random((24, 24)).astype(np.float32))
        mask = central_mask(24, 24, 4)
        kernel = gaussian_kernel(7, 2.0)
        out = decay_blur(img, mask, kernel, lam=0.0)
        assert np.array_equal(out.data, gaussian_blur(img, kernel).data)

    def test_matches_per_pixel_blend_oracle(self, rng):
        img = ImageBuffer(rng.random((64, 64, 3)).astype(np.float32))
        mask = central_mask(64, 64, 16)
        kernel = gaussian_kernel(151, 100.0)
        out = decay_blur(img, mask, kernel, lam=5.0)
        blurred = gaussian_blur(img, kernel).data.astype(np.float64)
        dist = edt_oracle(mask.binary()).astype(np.float64)
        diag = math.hypot(64, 64)
        for y, x in [(0, 0), (31, 31), (5, 60), (63, 0), (40, 40), (24, 24)]:
            weight = math.exp(-5.0 * dist[y, x] / diag)
            for c in range(3):
                expected = weight * blurred[y, x, c] \
                    + (1.0 - weight) * float(img.data[y, x, c])
                assert out.data[y, x, c] == pytest.approx(expected, abs=1e-6)

    def test_output_is_convex_combination(self, rng):
        img = ImageBuffer(rng.random((20, 20)).astype(np.float32))
        mask = central_mask(20, 20, 6)
        kernel = gaussian_kernel(5, 2.0)
        out = decay_blur(img, mask, kernel, lam=3.0)
        blurred = gaussian_blur(img, kernel)
        low = np.minimum(img.data, blurred.data) - 1e-6
        high = np.maximum(img.data, blurred.data) + 1e-6
        assert (out.data >= low).all() and (out.data <= high).all()

    def test_far_field_pixels_keep_original(self, rng):
        # raw pixel distances: weight < 1e-3 beyond ~1.4 px of the mask
        img = ImageBuffer(rng.random((48, 48)).astype(np.float32))
        mask = central_mask(48, 48, 8)
        out = decay_blur(img, mask, gaussian_kernel(31, 10.0), lam=5.0,
                         normalization="pixels")
        dist = edt_oracle(mask.binary())
        far = np.exp(-5.0 * dist) < 1e-3
        assert far.any()
        assert np.abs(out.data[:, :, 0][far] - img.data[:, :, 0][far]).max() < 1.1e-3

    def test_negative_lambda_rejected(self, rng):
        img = ImageBuffer(rng.random((8, 8)).astype(np.float32))
        with pytest.raises(ValueError):
            decay_blur(img, central_mask(8, 8, 2), gaussian_kernel(3, 1.0), lam=-1.0)

    def test_dimension_mismatch_rejected(self, rng):
        img = ImageBuffer(rng.random((8, 8)).astype(np.float32))
        with pytest.raises(ValueError):
            decay_blur(img, central_mask(9, 9, 2), gaussian_kernel(3, 1.0), lam=1.0)

    def test_empty_mask_propagates(self, rng):
        img = ImageBuffer(rng.random((8, 8)).astype(np.float32))
        with pytest.raises(EmptyMaskError):
            decay_blur(img, Mask(np.zeros((8, 8), np.float32)),
                       gaussian_kernel(3, 1.0), lam=1.0)


class TestSsim:
    def test_identity_is_exactly_one(self, rng):
        img = ImageBuffer(rng.random((16, 16)).astype(np.float32))
        assert ssim(img, img) == 1.0

    def test_symmetry(self, rng):
        for _ in range(10):
            a = ImageBuffer(rng.random((12, 14)).astype(np.float32))
            b = ImageBuffer(rng.random((12, 14)).astype(np.float32))
            assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9

    def test_constant_zero_vs_one(self):
        a = ImageBuffer(np.zeros((16, 16), dtype=np.float32))
        b = ImageBuffer(np.ones((16, 16), dtype=np.float32))
        c1 = 1e-4
        assert ssim(a, b) == pytest.approx(c1 / (1.0 + c1), abs=1e-7)

    def test_result_in_range(self, rng):
        for _ in range(10):
            a = ImageBuffer(rng.random((10, 10)).astype(np.float32))
            b = ImageBuffer(rng.random((10, 10)).astype(np.float32))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_shape_mismatch_rejected(self, rng):
        a = ImageBuffer(rng.random((10, 10)).astype(np.float32))
        b = ImageBuffer(rng.random((12, 10)).astype(np.float32))
        with pytest.raises(ValueError):
            ssim(a, b)

    def test_color_input_rejected(self, rng):
        a = ImageBuffer(rng.random((10, 10, 3)).astype(np.float32))
        with pytest.raises(ValueError):
            ssim(a, a)

    def test_too_small_rejected(self, rng):
        a = ImageBuffer(rng.random((4, 4)).astype(np.float32))
        with pytest.raises(ValueError):
            ssim(a, a)


class TestLuma:
    def test_known_weights(self):
        img = ImageBuffer(np.array([[[1.0, 0.0, 0.0]]], dtype=np.float32))
        assert to_luma(img).data[0, 0, 0] == pytest.approx(0.299)
        img = ImageBuffer(np.array([[[0.0, 1.0, 0.0]]], dtype=np.float32))
        assert to_luma(img).data[0, 0, 0] == pytest.approx(0.587)

    def test_single_channel_passthrough(self, rng):
        img = ImageBuffer(rng.random((4, 4)).astype(np.float32))
        assert to_luma(img) is img


class TestPng:
    def test_16bit_round_trip_exact_on_grid(self, rng, tmp_path):
        quantized = np.round(rng.random((11, 13, 3)) * 65535.0) / 65535.0
        img = ImageBuffer(quantized.astype(np.float32))
        path = tmp_path / "rt.png"
        write_png(img, path, bit_depth=16)
        assert np.array_equal(read_png(path).data, img.data)

    def test_16bit_quantization_error_bounded(self, rng, tmp_path):
        img = ImageBuffer(rng.random((9, 9)).astype(np.float32))
        path = tmp_path / "q.png"
        write_png(img, path, bit_depth=16)
        assert np.abs(read_png(path).data - img.data).max() <= 0.5 / 65535.0 + 1e-7

    def test_8bit_readable_by_pillow(self, rng, tmp_path):
        img = ImageBuffer(rng.random((7, 5, 3)).astype(np.float32))
        path = tmp_path / "p.png"
        write_png(img, path, bit_depth=8)
        pil = PILImage.open(path)
        assert pil.mode == "RGB" and pil.size == (5, 7)
        ours = read_png(path)
        theirs = np.asarray(pil, dtype=np.float64) / 255.0
        assert np.abs(ours.data - theirs).max() <= 1e-7

    def test_pillow_written_file_decodes_identically(self, rng, tmp_path):
        # Pillow chooses per-row filters, exercising the unfilter path
        arr = (rng.random((21, 17, 3)) * 255).astype(np.uint8)
        path = tmp_path / "pil.png"
        PILImage.fromarray(arr, mode="RGB").save(path)
        ours = read_png(path)
        assert np.abs(ours.data - arr.astype(np.float64) / 255.0).max() <= 1e-7

    def test_grayscale_16bit(self, rng, tmp_path):
        quantized = np.round(rng.random((6, 8)) * 65535.0) / 65535.0
        img = ImageBuffer(quantized.astype(np.float32))
        path = tmp_path / "g16.png"
        write_png(img, path, bit_depth=16)
        back = read_png(path)
        assert back.channels == 1
        assert np.array_equal(back.data, img.data)

    def test_encode_deterministic(self, rng):
        img = ImageBuffer(rng.random((10, 10, 3)).astype(np.float32))
        assert encode_png(img) == encode_png(img)

    def test_rgba_fallback(self, rng, tmp_path):
        arr = (rng.random((5, 5, 4)) * 255).astype(np.uint8)
        path = tmp_path / "rgba.png"
        PILImage.fromarray(arr, mode="RGBA").save(path)
        img = read_png(path)
        assert img.channels == 3

    def test_not_png_rejected(self, tmp_path):
        path = tmp_path / "x.png"
        path.write_bytes(b"definitely not a png")
        with pytest.raises(ValueError):
            read_png(path)


class TestImageTypes:
    def test_rejects_bad_channel_count(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((4, 4, 2), dtype=np.float32))

    def test_rejects_non_finite(self):
        data = np.zeros((2, 2), dtype=np.float32)
        data[0, 0] = np.nan
        with pytest.raises(ValueError):
            ImageBuffer(data)

    def test_mask_squeezes_trailing_channel(self):
        mask = Mask(np.zeros((3, 3, 1), dtype=np.float32))
        assert mask.data.shape == (3, 3)

    def test_mask_rejects_color(self):
        with pytest.raises(ValueError):
            Mask(np.zeros((3, 3, 3), dtype=np.float32))
