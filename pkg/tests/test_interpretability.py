from types import SimpleNamespace

import numpy as np
import pytest

from mmvqa.errors import ModeError
from mmvqa.interpretability import (
    Heatmap,
    attention_to_image,
    box_mass,
    render_heatmap,
    uniform_box_mass,
    upsample,
)
from mmvqa.model import EncoderOutput
from mmvqa.vision import VisionConfig, decode_image

from conftest import TOY_VISION, toy_model

SPATIAL = VisionConfig(**{**TOY_VISION.__dict__, "mode": "spatial"})
IMAGES = np.random.default_rng(4).random((2, 16, 16, 3))
TOKENS = [[5, 6, 7], [8]]


def run(model):
    seq = model.assemble_sequence(model.encode_images(IMAGES), TOKENS)
    return seq, model.encoder_forward(seq)


def zero_qk(model):
    for i in range(model.cfg.layers):
        for n in ("q", "k"):
            model.params[f"enc.{i}.{n}.w"].data[:] = 0
            model.params[f"enc.{i}.{n}.b"].data[:] = 0
    return model


class TestAttentionToImage:
    @pytest.mark.parametrize("reduction", ["last_layer_mean_heads", "rollout"])
    def test_uniform_attention_uniform_map(self, reduction):
        seq, out = run(zero_qk(toy_model(vision=SPATIAL)))
        g = SPATIAL.grid
        for b in range(2):
            hm = attention_to_image(out, seq, reduction, index=b)
            assert hm.weights.shape == (g, g)
            np.testing.assert_allclose(hm.weights, 1.0 / g**2, atol=1e-12)

    def test_rollout_of_uniform_layers_equals_single_layer(self):
        seq, out = run(zero_qk(toy_model(vision=SPATIAL, layers=3)))
        one = attention_to_image(EncoderOutput(out.hidden, out.attentions[:1]), seq, "last_layer_mean_heads")
        np.testing.assert_allclose(attention_to_image(out, seq, "rollout").weights, one.weights, atol=1e-12)

    def test_normalized_for_every_choice(self):
        seq, out = run(toy_model(vision=SPATIAL, seed=2))
        for b in range(2):
            for layer in range(2):
                for head in (None, 0, 1):
                    w = attention_to_image(out, seq, index=b, layer=layer, head=head).weights
                    assert w.min() >= 0 and abs(w.sum() - 1) < 1e-5
            w = attention_to_image(out, seq, "rollout", index=b).weights
            assert w.min() >= 0 and abs(w.sum() - 1) < 1e-5

    def test_multiscale_2d_is_mode_error(self):
        seq, out = run(toy_model())
        with pytest.raises(ModeError):
            attention_to_image(out, seq)
        profile = attention_to_image(out, seq, spatial=False)
        assert profile.weights.shape == (5,) and abs(profile.weights.sum() - 1) < 1e-12

    def test_single_image_token(self):
        seq = SimpleNamespace(
            n_img=1, text_start=3, pad_mask=np.ones((1, 5), bool),
            token_ids=np.array([[2, -1, 3, 9, 3]]),
        )
        att = np.random.default_rng(0).random((1, 2, 5, 5))
        out = EncoderOutput(None, [att / att.sum(-1, keepdims=True)])
        assert attention_to_image(out, seq, spatial=False).weights.tolist() == [1.0]

    def test_selection_recorded(self):
        seq, out = run(toy_model(vision=SPATIAL))
        hm = attention_to_image(out, seq, head=1)
        assert (hm.reduction, hm.layer, hm.head) == ("last_layer_mean_heads", 1, 1)

    def test_unknown_reduction(self):
        seq, out = run(toy_model(vision=SPATIAL))
        with pytest.raises(ValueError):
            attention_to_image(out, seq, "max")


def grid_map(w):
    return Heatmap(np.asarray(w, dtype=np.float64), "last_layer_mean_heads", 0, None)


class TestRender:
    def test_constant_is_mid_gray(self, tmp_path):
        img = np.random.default_rng(0).random((24, 20, 3))
        paths = render_heatmap(grid_map(np.full((3, 3), 1 / 9)), img, tmp_path / "x")
        assert [p.name for p in paths] == ["x.attn.pgm", "x.attn.ppm"]
        gray = decode_image(paths[0])
        assert gray.shape == (24, 20, 3) and (gray == 128 / 255).all()
        assert decode_image(paths[1]).shape == (24, 20, 3)

    def test_delta_is_brightest_at_its_cell(self, tmp_path):
        w = np.zeros((4, 4))
        w[1, 2] = 1.0
        gray = decode_image(render_heatmap(grid_map(w), np.zeros((32, 32, 3)), tmp_path / "d", overlay=False)[0])[..., 0]
        ys, xs = np.nonzero(gray == gray.max())
        # cell (1, 2) spans rows 8..16 and columns 16..24
        assert 8 <= ys.mean() < 16 and 16 <= xs.mean() < 24

    def test_overlay_alpha(self, tmp_path):
        img = np.full((16, 16, 3), 0.4)
        w = np.zeros((2, 2))
        w[0, 0] = 1.0
        over = decode_image(render_heatmap(grid_map(w), img, tmp_path / "o", alpha=0.5)[1])
        # green/blue carry only the image, halved
        assert np.allclose(over[..., 1], round(0.2 * 255) / 255)

    def test_upsample_needs_grid(self):
        with pytest.raises(ModeError):
            upsample(grid_map([0.5, 0.5]), 16, 16)


class TestBoxMass:
    def test_uniform_equals_baseline(self):
        box = (3, 5, 17, 12)
        hm = grid_map(np.full((4, 4), 1 / 16))
        assert box_mass(hm, box, 32, 32) == pytest.approx(uniform_box_mass(box, 32, 32), abs=1e-15)

    def test_whole_image(self):
        hm = grid_map(np.random.default_rng(0).dirichlet(np.ones(9)).reshape(3, 3))
        assert box_mass(hm, (0, 0, 30, 30), 30, 30) == pytest.approx(1.0)

    def test_cell_inside_box(self):
        w = np.zeros((4, 4))
        w[2, 1] = 1.0
        assert box_mass(grid_map(w), (8, 16, 16, 24), 32, 32) == pytest.approx(1.0)
        assert box_mass(grid_map(w), (0, 0, 8, 8), 32, 32) == 0.0
        assert box_mass(grid_map(w), (12, 16, 16, 24), 32, 32) == pytest.approx(0.5)
