"""Convolutional feature renderer and latent exposure modulation.

Feature maps are (H, W, C). Parameters live in flat ``name -> array`` dicts so
they can be wrapped as tensors, optimized, and serialized uniformly.
"""

import numpy as np

from . import autodiff as ad
from .attention import init_mlp, mlp_forward

UNET_WIDTHS = (32, 64, 128)


def _init_conv(rng, k, cin, cout, name, dtype, slope=ad.LEAKY_SLOPE, zero=False):
    fan_in = k * k * cin
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    w = np.zeros((k, k, cin, cout)) if zero else rng.uniform(-bound, bound, size=(k, k, cin, cout))
    return {f"{name}.W": w.astype(dtype), f"{name}.b": np.zeros(cout, dtype=dtype)}


def init_unet(in_channels=32, widths=UNET_WIDTHS, seed=0, dtype=np.float64):
    """Two stride-2 encoder stages, a bottleneck, two upsampling stages with skips, 1x1 head.

    No normalization layers.
    """
    rng = np.random.default_rng(seed)
    c0, c1, c2 = widths
    p = {}
    p.update(_init_conv(rng, 3, in_channels, c0, "unet.enc0", dtype))
    p.update(_init_conv(rng, 3, c0, c1, "unet.down1", dtype))
    p.update(_init_conv(rng, 3, c1, c2, "unet.down2", dtype))
    p.update(_init_conv(rng, 3, c2, c2, "unet.mid", dtype))
    p.update(_init_conv(rng, 3, c2, c1, "unet.up1", dtype))
    p.update(_init_conv(rng, 3, 2 * c1, c1, "unet.merge1", dtype))
    p.update(_init_conv(rng, 3, c1, c0, "unet.up2", dtype))
    p.update(_init_conv(rng, 3, 2 * c0, c0, "unet.merge2", dtype))
    p.update(_init_conv(rng, 1, c0, 3, "unet.head", dtype))
    return p


def init_tiny_renderer(in_channels=32, seed=0, dtype=np.float64):
    """A single 3x3 convolution; used where finite differencing the UNet is too slow."""
    rng = np.random.default_rng(seed)
    return _init_conv(rng, 3, in_channels, 3, "tiny.conv", dtype)


def _conv(params, name, x, stride=1, act=True):
    y = ad.conv2d(x, params[f"{name}.W"], params[f"{name}.b"], stride=stride)
    return ad.leaky_relu(y) if act else y


def unet_forward(feature_map, params):
    """(H, W, C) feature map to an (H, W, 3) image in (0, 1). H and W must be multiples of 4."""
    x = ad.as_tensor(feature_map)
    h, w = x.shape[:2]
    if h % 4 or w % 4:
        raise ValueError(f"unet_forward: resolution {h}x{w} must be a multiple of 4")
    e0 = _conv(params, "unet.enc0", x)
    e1 = _conv(params, "unet.down1", e0, stride=2)
    e2 = _conv(params, "unet.down2", e1, stride=2)
    m = _conv(params, "unet.mid", e2)
    u1 = _conv(params, "unet.up1", ad.upsample2x(m))
    u1 = _conv(params, "unet.merge1", ad.concat([u1, e1], axis=-1))
    u2 = _conv(params, "unet.up2", ad.upsample2x(u1))
    u2 = _conv(params, "unet.merge2", ad.concat([u2, e0], axis=-1))
    return ad.sigmoid(_conv(params, "unet.head", u2, act=False))


def tiny_forward(feature_map, params):
    return ad.sigmoid(_conv(params, "tiny.conv", ad.as_tensor(feature_map), act=False))


def init_renderer(kind, in_channels=32, seed=0, dtype=np.float64):
    if kind == "unet":
        return init_unet(in_channels, seed=seed, dtype=dtype)
    if kind == "tiny":
        return init_tiny_renderer(in_channels, seed=seed, dtype=dtype)
    raise ValueError(f"unknown renderer kind {kind!r}")


def renderer_kind(params):
    return "unet" if "unet.enc0.W" in params else "tiny"


def render_features(feature_map, params):
    if renderer_kind(params) == "unet":
        return unet_forward(feature_map, params)
    return tiny_forward(feature_map, params)


# ---------------------------------------------------------------------------
# latent modulation
# ---------------------------------------------------------------------------

LATENT_DIM = 128


def init_modulator(channels=32, latent_dim=LATENT_DIM, hidden=64, seed=0, dtype=np.float64):
    """latent -> hidden -> (raw scale, shift). The output layer starts at zero,
    so a fresh modulator is the identity (scale = 1 + raw)."""
    rng = np.random.default_rng(seed)
    p = init_mlp(rng, [latent_dim, hidden, 2 * channels], "mod", dtype=dtype)
    p["mod.1.W"][:] = 0.0
    return p


def modulation(z, params):
    """Per-channel (scale, shift) for latent code ``z``."""
    z = ad.as_tensor(z)
    out = mlp_forward(params, "mod", ad.reshape(z, (1, z.shape[-1])))
    c = out.shape[-1] // 2
    col = ad.reshape(out, (2 * c,))
    scale = ad.add(ad.take(col, np.arange(c)), 1.0)
    shift = ad.take(col, np.arange(c, 2 * c))
    return scale, shift


def modulate(feature_map, z, params):
    """F'[h, w, c] = scale_c * F[h, w, c] + shift_c."""
    f = ad.as_tensor(feature_map)
    scale, shift = modulation(ad.as_tensor(z, dtype=f.dtype), params)
    if scale.shape[0] != f.shape[-1]:
        raise ad.ShapeError(f"modulate: modulator width {scale.shape[0]} != feature channels {f.shape[-1]}")
    return ad.add(ad.mul(f, scale), shift)
