"""Attention heatmaps over image tokens, and their rendering.

Queries are the ``[CLS]`` position and the real text tokens; keys are the
image tokens. In spatial mode the ``G*G`` grid tokens give a 2-D map; the
pooled stage tokens give a per-stage profile in either mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ModeError
from .tokenizer import SEP_ID
from .vision import resize_bilinear, write_pgm, write_ppm

REDUCTIONS = ("last_layer_mean_heads", "rollout")
N_POOLED = 5


@dataclass(frozen=True)
class Heatmap:
    weights: np.ndarray  # (G, G) map or (n,) profile; non-negative, sums to 1
    reduction: str
    layer: int | None
    head: int | None

    @property
    def is_spatial(self):
        return self.weights.ndim == 2


def _query_positions(seq, b):
    real = np.nonzero(seq.pad_mask[b])[0]
    text = [int(i) for i in real if i >= seq.text_start and seq.token_ids[b, i] != SEP_ID]
    return [0] + text


def _key_positions(seq, spatial):
    n = seq.n_img
    if n == 0:
        raise ModeError("sequence has no image tokens")
    if not spatial:
        return list(range(1, 1 + min(n, N_POOLED))), None
    g2 = n - N_POOLED
    g = math.isqrt(max(g2, 0))
    if g2 <= 0 or g * g != g2:
        raise ModeError("a 2-D heatmap needs spatial feature mode (grid tokens); use spatial=False for the stage profile")
    return list(range(1 + N_POOLED, 1 + n)), g


def attention_to_image(out, seq, reduction="last_layer_mean_heads", spatial=True, index=0, layer=-1, head=None):
    """Normalized attention mass from text/[CLS] queries onto image keys.

    ``reduction="rollout"`` multiplies the head-averaged maps of all layers,
    each mixed half-and-half with the identity for the residual path.
    ``layer`` and ``head`` select the map for the last-layer reduction
    (``head=None`` averages heads).
    """
    if reduction not in REDUCTIONS:
        raise ContractError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    keys, g = _key_positions(seq, spatial)
    queries = _query_positions(seq, index)
    if reduction == "rollout":
        t = out.attentions[0].shape[-1]
        eye = np.eye(t)
        r = eye
        for a in out.attentions:
            r = (0.5 * a[index].astype(np.float64).mean(axis=0) + 0.5 * eye) @ r
        layer_sel, head_sel = None, None
    else:
        a = out.attentions[layer][index].astype(np.float64)
        r = a.mean(axis=0) if head is None else a[head]
        layer_sel, head_sel = layer % len(out.attentions), head
    w = r[np.ix_(queries, keys)].mean(axis=0)
    total = w.sum()
    w = np.full(len(keys), 1.0 / len(keys)) if total <= 0 else w / total
    return Heatmap(w.reshape(g, g) if spatial else w, reduction, layer_sel, head_sel)


def upsample(hm, height, width):
    """Bilinear (half-pixel centre) upsampling of a 2-D heatmap to image size."""
    if not hm.is_spatial:
        raise ModeError("only 2-D heatmaps can be upsampled")
    grid = hm.weights[..., None].astype(np.float32)
    return resize_bilinear(grid, height, width)[..., 0].astype(np.float64)


def render_heatmap(hm, img, path, alpha=0.5, overlay=True):
    """Write ``<path>.attn.pgm`` and, if ``overlay``, ``<path>.attn.ppm``.

    The map is upsampled to the image size and min-max normalized; a
    constant map renders as mid-gray. The overlay blends the image with the
    map placed in the red channel.
    """
    if not 0 <= alpha <= 1:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    h, w = img.shape[:2]
    up = upsample(hm, h, w)
    lo, hi = up.min(), up.max()
    gray = np.full_like(up, 0.5) if hi - lo <= 1e-12 * max(1.0, abs(hi)) else (up - lo) / (hi - lo)
    stem = str(path)
    written = [Path(stem + ".attn.pgm")]
    write_pgm(written[0], gray)
    if overlay:
        red = np.zeros((h, w, 3))
        red[..., 0] = gray
        blend = (1 - alpha) * np.asarray(img, dtype=np.float64)[..., :3] + alpha * red
        written.append(Path(stem + ".attn.ppm"))
        write_ppm(written[1], np.clip(blend, 0, 1))
    return written


def box_mass(hm, box, height, width):
    """Heatmap mass inside pixel box ``(x0, y0, x1, y1)``, end-exclusive.

    Each grid cell spreads its weight uniformly over the pixels it covers,
    so the result is the exact overlap-weighted sum over cells.
    """
    if not hm.is_spatial:
        raise ModeError("box mass needs a 2-D heatmap")
    g = hm.weights.shape[0]
    x0, y0, x1, y1 = box
    ys = np.linspace(0, height, g + 1)
    xs = np.linspace(0, width, g + 1)
    fy = np.clip(np.minimum(ys[1:], y1) - np.maximum(ys[:-1], y0), 0, None) / np.diff(ys)
    fx = np.clip(np.minimum(xs[1:], x1) - np.maximum(xs[:-1], x0), 0, None) / np.diff(xs)
    return float((hm.weights * np.outer(fy, fx)).sum())


def uniform_box_mass(box, height, width):
    x0, y0, x1, y1 = box
    return (x1 - x0) * (y1 - y0) / (height * width)
