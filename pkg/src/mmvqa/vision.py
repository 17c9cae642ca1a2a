"""Image I/O, resizing, augmentation and the multi-scale CNN feature extractor.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DecodeError, ShapeError
from .numerics import Tensor, ops

N_SCALES = 5
MIN_SIDE = 8


# -- netpbm -----------------------------------------------------------------


def _read_header(buf, n_fields):
    """Parse netpbm header fields; returns (fields, offset of first pixel byte)."""
    fields, pos = [], 2
    while len(fields) < n_fields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("malformed netpbm header", offset=pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after netpbm header", offset=pos)
    return fields, pos + 1


def decode_image(path):
    """Decode a binary PPM (P6) or PGM (P5) file with 8-bit samples."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise DecodeError(f"{path}: not a binary PPM/PGM file", offset=0)
    (w, h, maxval), start = _read_header(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DecodeError(f"{path}: unsupported dimensions {w}x{h} or maxval {maxval}", offset=start)
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    pixels = buf[start : start + need]
    if len(pixels) < need:
        raise DecodeError(
            f"{path}: truncated pixel data, expected {need} bytes, found {len(pixels)}", offset=start + len(pixels)
        )
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr)


def _to_bytes(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    img = np.asarray(img)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _to_bytes(img).tobytes())


def write_pgm(path, gray):
    gray = np.asarray(gray)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _to_bytes(gray).tobytes())


def check_image(img):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ShapeError(f"image {img.shape[:2]} smaller than {MIN_SIDE}x{MIN_SIDE}")
    if img.min() < 0 or img.max() > 1:
        raise ShapeError("image values outside [0, 1]")
    return img


# -- geometry ---------------------------------------------------------------


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centres (the grid of a pixel is its centre)."""
    if out_h < MIN_SIDE or out_w < MIN_SIDE:
        raise ContractError(f"resize target {out_h}x{out_w} below {MIN_SIDE}x{MIN_SIDE}")
    return _resize(img, out_h, out_w)


def _resize(img, out_h, out_w):
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return kernels.bilinear_sample(img, yy, xx)


def rotate(img, degrees):
    """Rotate about the image centre, sampling bilinearly with edge clamping."""
    h, w = img.shape[:2]
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    src_x = c * xx + s * yy + cx
    src_y = -s * xx + c * yy + cy
    return kernels.bilinear_sample(img, src_y, src_x)


@dataclass(frozen=True)
class AugmentConfig:
    crop_fraction: tuple = (0.8, 1.0)
    rotation: tuple = (-10.0, 10.0)
    brightness: tuple = (-0.1, 0.1)
    contrast: tuple = (-0.1, 0.1)
    saturation: tuple = (-0.1, 0.1)
    enabled: bool = True

    def __post_init__(self):
        for name in ("crop_fraction", "rotation", "brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment {name}: lower bound {lo} exceeds upper bound {hi}")
        if not 0 < self.crop_fraction[0] <= self.crop_fraction[1] <= 1:
            raise ConfigError(f"augment crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if self.rotation[0] < -180 or self.rotation[1] > 180:
            raise ConfigError(f"augment rotation must lie in [-180, 180], got {self.rotation}")

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


def augment(img, cfg, rng):
    """Random crop (resized back), rotation and colour jitter, clamped to [0, 1].

    All random draws happen in a fixed order whatever the config, so a seed
    fixes the whole transform. Steps whose drawn parameter is the identity
    are skipped, which keeps degenerate configs bitwise exact.
    """
    if not cfg.enabled:
        return img.copy()
    h, w = img.shape[:2]
    frac = rng.uniform(*cfg.crop_fraction)
    ch, cw = max(MIN_SIDE, int(round(frac * h))), max(MIN_SIDE, int(round(frac * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    angle = rng.uniform(*cfg.rotation)
    bright = 1.0 + rng.uniform(*cfg.brightness)
    contrast = 1.0 + rng.uniform(*cfg.contrast)
    sat = 1.0 + rng.uniform(*cfg.saturation)

    out = img
    if (ch, cw) != (h, w):
        out = _resize(np.ascontiguousarray(img[y0 : y0 + ch, x0 : x0 + cw]), h, w)
    if angle != 0.0:
        out = rotate(out, angle)
    if bright != 1.0:
        out = out * np.float32(bright)
    if contrast != 1.0:
        m = out.mean(dtype=np.float64)
        out = ((out - m) * contrast + m).astype(np.float32)
    if sat != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = (gray + (out - gray) * np.float32(sat)).astype(np.float32)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- feature extractor ------------------------------------------------------


@dataclass(frozen=True)
class VisionConfig:
    input_size: int = 224
    channels: tuple = (16, 32, 64, 128, 128)
    strides: tuple = (2, 2, 2, 2, 2)
    stem_kernel: int = 7
    mode: str = "multiscale"
    normalize: bool = True

    def __post_init__(self):
        if len(self.channels) != N_SCALES or len(self.strides) != N_SCALES:
            raise ConfigError(f"vision needs exactly {N_SCALES} stages")
        if self.mode not in ("multiscale", "spatial"):
            raise ConfigError(f"unknown image feature mode {self.mode!r}")
        if self.input_size < MIN_SIDE:
            raise ConfigError(f"input_size must be at least {MIN_SIDE}")

    def stage_sizes(self):
        sizes, s = [], self.input_size
        for i, stride in enumerate(self.strides):
            k = self.stem_kernel if i == 0 else 3
            s = (s + 2 * (k // 2) - k) // stride + 1
            sizes.append(s)
        return sizes

    @property
    def grid(self):
        return self.stage_sizes()[-1]

    @property
    def n_tokens(self):
        return N_SCALES + (self.grid**2 if self.mode == "spatial" else 0)


@dataclass
class ImageFeatures:
    """Per-image feature vectors: five pooled scales, plus a grid in spatial mode."""

    pooled: Tensor  # (N, 5, D)
    grid: Tensor | None = None  # (N, G*G, D)
    grid_size: int = 0
    mode: str = "multiscale"

    def tokens(self):
        if self.grid is None:
            return self.pooled
        return ops.concat([self.pooled, self.grid], axis=1)

    @property
    def dim(self):
        return self.pooled.shape[-1]

    @property
    def n_tokens(self):
        return self.pooled.shape[1] + (0 if self.grid is None else self.grid.shape[1])


def init_vision_params(cfg, dim, rng, dtype=np.float32):
    params = {}
    cin = 3
    for i, cout in enumerate(cfg.channels):
        k = cfg.stem_kernel if i == 0 else 3
        params[f"vision.conv{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))
        params[f"vision.conv{i}.b"] = np.zeros(cout)
        params[f"vision.proj{i}.w"] = rng.normal(0.0, 1.0 / math.sqrt(cout), size=(cout, dim))
        params[f"vision.proj{i}.b"] = np.zeros(dim)
        cin = cout
    if cfg.mode == "spatial":
        params["vision.grid.w"] = rng.normal(0.0, 1.0 / math.sqrt(cin), size=(cin, dim))
        params["vision.grid.b"] = np.zeros(dim)
    if cfg.normalize:
        params["vision.ln.g"] = np.ones(dim)
        params["vision.ln.b"] = np.zeros(dim)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def encode_image(images, params, cfg):
    """Run the 5-stage CNN on a batch of images (N, S, S, 3).

    Each stage output is global-average-pooled and passed through its own
    linear map to the model width; spatial mode also projects every cell of
    the last stage's grid. Differentiable end to end.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    s = cfg.input_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ShapeError(f"encode_image expects (N, {s}, {s}, 3) input, got {x.shape}")
    if cfg.normalize:
        x = ops.add(x, Tensor(np.full(x.shape, -0.5, dtype=x.dtype), dtype=x.dtype))
    ln = (params["vision.ln.g"], params["vision.ln.b"]) if cfg.normalize else None
    pooled = []
    for i, stride in enumerate(cfg.strides):
        k = params[f"vision.conv{i}.w"].shape[0]
        x = ops.gelu(ops.conv2d(x, params[f"vision.conv{i}.w"], params[f"vision.conv{i}.b"], stride, k // 2))
        v = ops.linear(ops.global_avg_pool(x), params[f"vision.proj{i}.w"], params[f"vision.proj{i}.b"])
        if ln:
            v = ops.layer_norm(v, *ln)
        pooled.append(ops.reshape(v, (v.shape[0], 1, v.shape[1])))
    feats = ImageFeatures(ops.concat(pooled, axis=1), mode=cfg.mode)
    if cfg.mode == "spatial":
        n, g, _, c = x.shape
        grid = ops.linear(ops.reshape(x, (n, g * g, c)), params["vision.grid.w"], params["vision.grid.b"])
        if ln:
            grid = ops.layer_norm(grid, *ln)
        feats.grid = grid
        feats.grid_size = g
    return feats
