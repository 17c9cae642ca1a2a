import numpy as np
import pytest

from mmvqa import kernels
from mmvqa import _pykernels
from mmvqa.errors import ConfigError, ContractError, DecodeError, ShapeError
from mmvqa.numerics import Tensor, grad_check, ops
from mmvqa.vision import (
    AugmentConfig,
    VisionConfig,
    augment,
    decode_image,
    encode_image,
    init_vision_params,
    resize_bilinear,
    rotate,
    write_pgm,
    write_ppm,
)

TINY = VisionConfig(input_size=16, channels=(2, 3, 3, 4, 4), strides=(2, 2, 1, 2, 1), stem_kernel=3)


def write_raw(path, header, payload):
    path.write_bytes(header + bytes(payload))


class TestDecode:
    def test_white(self, tmp_path):
        write_raw(tmp_path / "a.ppm", b"P6\n2 2\n255\n", [255] * 12)
        img = decode_image(tmp_path / "a.ppm")
        assert img.shape == (2, 2, 3) and (img == 1.0).all()

    def test_black(self, tmp_path):
        write_raw(tmp_path / "a.ppm", b"P6 2 2 255\n", [0] * 12)
        assert (decode_image(tmp_path / "a.ppm") == 0.0).all()

    def test_truncated(self, tmp_path):
        write_raw(tmp_path / "a.ppm", b"P6\n4 4\n255\n", [0] * 6)
        with pytest.raises(DecodeError, match="truncated") as err:
            decode_image(tmp_path / "a.ppm")
        assert err.value.offset == len(b"P6\n4 4\n255\n") + 6

    def test_bad_magic(self, tmp_path):
        write_raw(tmp_path / "a.ppm", b"P3\n2 2\n255\n", [0] * 12)
        with pytest.raises(DecodeError):
            decode_image(tmp_path / "a.ppm")

    def test_comment_and_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(9, 11, 3)).astype(np.float32) / 255
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(decode_image(tmp_path / "x.ppm"), img)
        raw = (tmp_path / "x.ppm").read_bytes().replace(b"P6\n", b"P6\n# note\n", 1)
        (tmp_path / "y.ppm").write_bytes(raw)
        np.testing.assert_array_equal(decode_image(tmp_path / "y.ppm"), img)

    def test_pgm(self, tmp_path):
        write_pgm(tmp_path / "g.pgm", np.full((8, 8), 0.5))
        img = decode_image(tmp_path / "g.pgm")
        assert img.shape == (8, 8, 3) and np.allclose(img, 128 / 255)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).random((10, 12, 3)).astype(np.float32)
        np.testing.assert_allclose(resize_bilinear(img, 10, 12), img, atol=1e-6)

    def test_constant(self):
        img = np.full((9, 9, 3), 0.25, dtype=np.float32)
        np.testing.assert_allclose(resize_bilinear(img, 20, 13), 0.25, atol=1e-7)

    def test_checkerboard_centre(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)[..., None].repeat(3, axis=2)
        # hand computation: centre output pixel maps to source (0.5, 0.5), the mean of all four
        out = kernels.bilinear_sample(img, np.array([[0.5]]), np.array([[0.5]]))
        assert out[0, 0, 0] == pytest.approx(0.5)
        # resize_bilinear requires >= 8 outputs; the same half-pixel mapping on a 3x3 target:
        ys = (np.arange(3) + 0.5) * (2 / 3) - 0.5
        yy, xx = np.meshgrid(ys, ys, indexing="ij")
        out = kernels.bilinear_sample(img, yy, xx)
        assert out[1, 1, 0] == pytest.approx(0.5)
        assert out[0, 0, 0] == 0.0 and out[0, 2, 0] == 1.0

    def test_too_small(self):
        with pytest.raises(ContractError):
            resize_bilinear(np.zeros((10, 10, 3), np.float32), 4, 10)

    def test_backends_agree(self):
        rng = np.random.default_rng(1)
        img = rng.random((13, 7, 3)).astype(np.float32)
        ys, xs = rng.uniform(-2, 15, (5, 6)), rng.uniform(-2, 9, (5, 6))
        np.testing.assert_allclose(kernels.bilinear_sample(img, ys, xs), _pykernels.bilinear_sample(img, ys, xs), atol=1e-6)


class TestAugment:
    IMG = np.random.default_rng(3).random((32, 32, 3)).astype(np.float32)

    def test_disabled(self):
        out = augment(self.IMG, AugmentConfig(enabled=False), np.random.default_rng(0))
        assert out.tobytes() == self.IMG.tobytes()

    def test_degenerate_ranges(self):
        out = augment(self.IMG, AugmentConfig.identity(), np.random.default_rng(0))
        assert out.tobytes() == self.IMG.tobytes()

    def test_seeded(self):
        a = augment(self.IMG, AugmentConfig(), np.random.default_rng(5))
        b = augment(self.IMG, AugmentConfig(), np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()
        assert a.shape == self.IMG.shape and a.min() >= 0 and a.max() <= 1

    def test_changes_image(self):
        assert not np.array_equal(augment(self.IMG, AugmentConfig(), np.random.default_rng(5)), self.IMG)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            AugmentConfig(rotation=(10, -10))
        with pytest.raises(ConfigError):
            AugmentConfig(rotation=(-200, 0))

    def test_rotate_zero_is_identity(self):
        np.testing.assert_allclose(rotate(self.IMG, 0.0), self.IMG, atol=1e-6)

    def test_rotate_180(self):
        np.testing.assert_allclose(rotate(self.IMG, 180.0), self.IMG[::-1, ::-1], atol=1e-5)


class TestEncode:
    def test_five_vectors(self):
        params = init_vision_params(TINY, 8, np.random.default_rng(0))
        feats = encode_image(np.random.default_rng(1).random((3, 16, 16, 3)), params, TINY)
        assert feats.pooled.shape == (3, 5, 8)
        assert feats.n_tokens == 5

    def test_spatial_grid(self):
        cfg = VisionConfig(**{**TINY.__dict__, "mode": "spatial"})
        params = init_vision_params(cfg, 8, np.random.default_rng(0))
        feats = encode_image(np.random.default_rng(1).random((2, 16, 16, 3)), params, cfg)
        assert feats.grid.shape == (2, cfg.grid**2, 8)
        assert cfg.n_tokens == 5 + cfg.grid**2

    def test_default_geometry(self):
        assert VisionConfig().grid == 7

    def test_pure(self):
        params = init_vision_params(TINY, 8, np.random.default_rng(0))
        img = np.random.default_rng(1).random((1, 16, 16, 3))
        a = encode_image(np.concatenate([img, img]), params, TINY).pooled.data
        assert a[0].tobytes() == a[1].tobytes()

    def test_zero_image_zero_features(self):
        cfg = VisionConfig(**{**TINY.__dict__, "normalize": False})
        params = init_vision_params(cfg, 8, np.random.default_rng(0))
        feats = encode_image(np.zeros((1, 16, 16, 3)), params, cfg)
        assert (feats.pooled.data == 0).all()

    def test_wrong_size(self):
        params = init_vision_params(TINY, 8, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encode_image(np.zeros((1, 15, 16, 3)), params, TINY)

    @pytest.mark.parametrize("mode", ["multiscale", "spatial"])
    def test_grad_check(self, mode):
        cfg = VisionConfig(**{**TINY.__dict__, "mode": mode})
        rng = np.random.default_rng(2)
        params = init_vision_params(cfg, 6, rng, dtype=np.float64)
        img = rng.random((2, 16, 16, 3))
        readout = rng.normal(size=(2, cfg.n_tokens, 6))

        def through_image(x):
            return ops.sum(ops.mul(encode_image(x, params, cfg).tokens(), Tensor(readout)))

        worst = max(grad_check(through_image, rng.random((2, 16, 16, 3)), coords=25, rng=rng) for _ in range(4))
        assert worst < 1e-6
        for name in ("vision.conv0.w", "vision.conv3.w", "vision.proj2.w", "vision.ln.g"):
            def through_param(p, name=name):
                return ops.sum(ops.mul(encode_image(img, {**params, name: p}, cfg).tokens(), Tensor(readout)))

            assert grad_check(through_param, params[name].data, coords=20, rng=rng) < 1e-6


class TestKernels:
    @pytest.mark.parametrize("k,stride,pad", [(7, 2, 3), (3, 2, 1), (3, 1, 1), (1, 1, 0)])
    def test_backends_agree(self, k, stride, pad):
        x = np.random.default_rng(k + stride).random((2, 11, 9, 3))
        cols = kernels.im2col(x, k, stride, pad)
        np.testing.assert_allclose(cols, _pykernels.im2col(x, k, stride, pad))
        back = kernels.col2im(cols, x.shape, k, stride, pad)
        np.testing.assert_allclose(back, _pykernels.col2im(cols, x.shape, k, stride, pad), rtol=1e-12)

    def test_col2im_is_adjoint(self):
        rng = np.random.default_rng(0)
        x = rng.random((1, 8, 8, 2))
        cols = kernels.im2col(x, 3, 2, 1)
        y = rng.random(cols.shape)
        lhs = (cols * y).sum()
        rhs = (x * kernels.col2im(y, x.shape, 3, 2, 1)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)
