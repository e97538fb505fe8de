import numpy as np
import pytest
from PIL import Image

from retina_eit.errors import ContractError
from retina_eit.explain import SaliencyMap, blend, colorize, grad_cam, jet_table, overlay_png
from retina_eit.models import VARIANTS, ModelConfig, build_model


def image(seed=0, side=64):
    return np.random.default_rng(seed).integers(0, 256, (side, side, 3)).astype(np.uint8)


class ShiftedLogits:
    """Wraps a model and adds the same constant to every logit."""

    def __init__(self, model, shift):
        self._model, self._shift = model, shift

    def logits(self, images, capture=False):
        return self._model.logits(images, capture=capture) + self._shift

    def __getattr__(self, name):
        return getattr(self._model, name)


@pytest.mark.parametrize("variant", VARIANTS)
def test_map_shape_and_normalisation(variant):
    model = build_model(ModelConfig.from_preset("desk", variant))
    sal = grad_cam(model, image(), 4)
    assert sal.grid.shape == (4, 4) and sal.overlay.shape == (64, 64)
    for arr in (sal.grid, sal.overlay):
        assert arr.min() >= 0 and arr.max() <= 1
        assert arr.max() == 1.0 or not arr.any()
    assert all(p.grad is None for p in model.trainable_parameters().values())


def test_paper_preset_grid():
    model = build_model(ModelConfig.from_preset("paper", "vit", depth=1))
    sal = grad_cam(model, image(side=256), 0)
    assert sal.grid.shape == (4, 4) and sal.overlay.shape == (256, 256)


@pytest.mark.parametrize("variant", VARIANTS)
def test_logit_shift_invariance(variant):
    model = build_model(ModelConfig.from_preset("desk", variant))
    base = grad_cam(model, image(3), 2)
    for shift in (1e-5, -1e-5, 3.0):
        shifted = grad_cam(ShiftedLogits(model, shift), image(3), 2)
        np.testing.assert_allclose(shifted.grid, base.grid, atol=1e-5)
        np.testing.assert_allclose(shifted.overlay, base.overlay, atol=1e-5)


def test_zero_gradient_gives_zero_map():
    model = build_model(ModelConfig.from_preset("desk", "vit"))
    model.head.fc2.weight.data[...] = 0
    sal = grad_cam(model, image(), 1)
    assert not sal.grid.any() and not sal.overlay.any()
    assert np.isfinite(sal.overlay).all()


@pytest.mark.parametrize("bad", [-1, 5, 2.0, "1"])
def test_invalid_class(bad):
    model = build_model(ModelConfig.from_preset("desk", "vit"))
    with pytest.raises(ContractError):
        grad_cam(model, image(), bad)


def test_jet_table_shape_and_ends():
    table = jet_table()
    assert table.shape == (256, 3) and table.dtype == np.uint8
    assert table[0, 2] > table[0, 0]  # cold end is blue
    assert table[-1, 0] > table[-1, 2]  # hot end is red


def test_blend_pixel_arithmetic(rng):
    img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    values = rng.random((8, 8))
    colors = jet_table()[np.clip(np.floor(values * 255 + 0.5), 0, 255).astype(int)]
    want = np.floor(0.5 * img.astype(float) + 0.5 * colors.astype(float) + 0.5)
    np.testing.assert_array_equal(blend(img, values), want.astype(np.uint8))
    np.testing.assert_array_equal(colorize(np.zeros((2, 2))), np.broadcast_to(jet_table()[0], (2, 2, 3)))
    with pytest.raises(ContractError):
        blend(img, values[:4])


def test_overlay_png_round_trip_and_determinism(tmp_path, rng):
    img = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    sal = SaliencyMap(np.zeros((4, 4)), rng.random((64, 64)), 0)
    overlay_png(img, sal, tmp_path / "a.png")
    overlay_png(img, sal, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    back = np.asarray(Image.open(tmp_path / "a.png"))
    np.testing.assert_array_equal(back, blend(img, sal.overlay))


def test_overlay_png_unwritable(tmp_path):
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(OSError):
        overlay_png(img, np.zeros((4, 4)), tmp_path / "missing" / "x.png")
