import numpy as np
import pytest

from pointattn import autodiff as ad
from pointattn.autodiff import Tape, Tensor
from pointattn.renderer import (
    LATENT_DIM,
    init_modulator,
    init_renderer,
    init_unet,
    modulate,
    modulation,
    render_features,
    renderer_kind,
    unet_forward,
)


def test_unet_shape_and_range():
    rng = np.random.default_rng(0)
    params = init_unet(seed=0)
    out = unet_forward(rng.normal(size=(32, 32, 32)), params).data
    assert out.shape == (32, 32, 3)
    assert np.all(out > 0) and np.all(out < 1)


def test_unet_zero_weights_give_half():
    params = {k: np.zeros_like(v) for k, v in init_unet(seed=1).items()}
    out = unet_forward(np.random.default_rng(1).normal(size=(16, 16, 32)), params).data
    np.testing.assert_array_equal(out, 0.5)


def test_unet_rejects_odd_resolution():
    with pytest.raises(ValueError, match="multiple of 4"):
        unet_forward(np.zeros((10, 12, 32)), init_unet())


def test_unet_receptive_field():
    rng = np.random.default_rng(2)
    params = init_unet(seed=2)
    with Tape() as tape:
        x = Tensor(rng.normal(size=(48, 48, 32)), requires_grad=True)
        out = unet_forward(x, params)
        probe = ad.sum(ad.take(ad.reshape(out, (48 * 48, 3)), [20 * 48 + 20]))
        (g,) = tape.backward(probe, [x])
    mag = np.abs(g).sum(-1)
    assert mag[20, 20] > 0 and mag[18:23, 18:23].min() > 0
    assert np.all(mag[45:, :] == 0) and np.all(mag[:, 45:] == 0)
    # a finite-difference probe agrees with the analytic zero and nonzero entries
    eps = 1e-6
    for (i, j) in ((20, 20), (47, 47)):
        xp, xm = x.data.copy(), x.data.copy()
        xp[i, j, 0] += eps
        xm[i, j, 0] -= eps
        fd = (unet_forward(xp, params).data[20, 20].sum() - unet_forward(xm, params).data[20, 20].sum()) / (2 * eps)
        assert abs(fd - g[i, j, 0]) < 1e-6


def test_renderer_dispatch():
    tiny = init_renderer("tiny", seed=0)
    assert renderer_kind(tiny) == "tiny" and renderer_kind(init_renderer("unet")) == "unet"
    out = render_features(np.zeros((3, 5, 32)), tiny).data
    assert out.shape == (3, 5, 3)
    with pytest.raises(ValueError):
        init_renderer("vit")


def test_fresh_modulator_is_identity():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(4, 4, 32))
    out = modulate(f, rng.normal(size=LATENT_DIM), init_modulator(seed=3)).data
    np.testing.assert_array_equal(out, f)


def test_zero_scale_gives_shift():
    rng = np.random.default_rng(4)
    params = init_modulator(seed=4)
    shift = rng.normal(size=32)
    params["mod.1.W"][:] = 0.0
    params["mod.1.b"][:] = np.concatenate([-np.ones(32), shift])
    out = modulate(rng.normal(size=(3, 3, 32)), rng.normal(size=LATENT_DIM), params).data
    np.testing.assert_allclose(out, np.broadcast_to(shift, (3, 3, 32)), atol=1e-15)


def test_distinct_latents_give_distinct_features():
    rng = np.random.default_rng(5)
    params = init_modulator(seed=5)
    params["mod.1.W"][:] = rng.normal(scale=0.1, size=params["mod.1.W"].shape)
    f = rng.normal(size=(4, 4, 32))
    a = modulate(f, rng.normal(size=LATENT_DIM), params).data
    b = modulate(f, rng.normal(size=LATENT_DIM), params).data
    assert np.abs(a - b).max() > 1e-9
    scale, shift = modulation(rng.normal(size=LATENT_DIM), params)
    assert scale.shape == (32,) and shift.shape == (32,)


def test_modulator_width_mismatch():
    with pytest.raises(ad.ShapeError):
        modulate(np.zeros((2, 2, 16)), np.zeros(LATENT_DIM), init_modulator())
