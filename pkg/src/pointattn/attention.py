"""Proximity attention over the K points nearest each ray."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import encoding_size, positional_encode

CLAMP = 80.0


@dataclass
class AttentionConfig:
    feature_dim: int = 64  # h
    key_dim: int = 32  # mu
    value_dim: int = 32  # d_feat
    hidden: int = 64
    n_bands: int = 6
    include_last_band: bool = True
    background_token: float = 5.0
    aggregation: str = "foreground"  # or "base"

    def input_dims(self):
        enc3 = encoding_size(3, self.n_bands, self.include_last_band)
        return {"key": 3 * enc3, "value": 2 * enc3 + self.feature_dim, "query": enc3}


def init_mlp(rng, sizes, prefix, slope=ad.LEAKY_SLOPE, dtype=np.float64):
    """He-uniform weights sized for leaky-ReLU fan-in, zero biases."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
        params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"{prefix}.{i}.b"] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_layers(params, prefix):
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def mlp_forward(params, prefix, x):
    """Linear layers with leaky-ReLU between them and a linear output."""
    n = mlp_layers(params, prefix)
    h = x
    for i in range(n):
        w = params[f"{prefix}.{i}.W"]
        if h.shape[-1] != w.shape[0]:
            raise ad.ShapeError(f"{prefix} layer {i}: input width {h.shape[-1]} != {w.shape[0]}")
        h = ad.matmul(h, w) + params[f"{prefix}.{i}.b"]
        if i < n - 1:
            h = ad.leaky_relu(h)
    return h


def init_attention_params(cfg: AttentionConfig, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    dims = cfg.input_dims()
    params = {}
    params.update(init_mlp(rng, [dims["key"], cfg.hidden, cfg.hidden, cfg.key_dim], "attn.key", dtype=dtype))
    params.update(init_mlp(rng, [dims["value"], cfg.hidden, cfg.hidden, cfg.value_dim], "attn.value", dtype=dtype))
    params.update(init_mlp(rng, [dims["query"], cfg.hidden, cfg.hidden, cfg.key_dim], "attn.query", dtype=dtype))
    return params


def compute_kvq(geom, point_enc, features, dirs, params, cfg: AttentionConfig):
    """Keys (R, K, mu), values (R, K, d_feat) and queries (R, mu).

    ``geom`` holds along/perp displacements of shape (R, K, 3); ``point_enc``
    is the positional encoding of the selected points (R, K, E); ``features``
    the raw per-point features (R, K, h), which are not encoded.
    """
    enc_s = positional_encode(geom.along, cfg.n_bands, cfg.include_last_band)
    enc_t = positional_encode(geom.perp, cfg.n_bands, cfg.include_last_band)
    r, k = enc_s.shape[:2]
    if features.shape[-1] != cfg.feature_dim:
        raise ad.ShapeError(f"compute_kvq: feature dim {features.shape[-1]} != configured {cfg.feature_dim}")
    key_in = ad.reshape(ad.concat([enc_s, enc_t, point_enc], axis=-1), (r * k, -1))
    val_in = ad.reshape(ad.concat([enc_s, enc_t, features], axis=-1), (r * k, -1))
    keys = mlp_forward(params, "attn.key", key_in)
    values = mlp_forward(params, "attn.value", val_in)
    query_in = positional_encode(dirs, cfg.n_bands, cfg.include_last_band)
    queries = mlp_forward(params, "attn.query", query_in)
    return (ad.reshape(keys, (r, k, keys.shape[-1])),
            ad.reshape(values, (r, k, values.shape[-1])),
            queries)


def attention_weights(keys, queries):
    """softmax over the K points of <q, k> / sqrt(mu). ``keys`` (..., K, mu), ``queries`` (..., mu)."""
    keys = ad.as_tensor(keys)
    queries = ad.as_tensor(queries, dtype=keys.dtype)
    mu = keys.shape[-1]
    q = ad.reshape(queries, queries.shape[:-1] + (1, mu))
    logits = ad.scale(ad.inner(keys, q), 1.0 / np.sqrt(mu))
    return ad.softmax(logits, axis=-1)


@dataclass
class BackgroundTerms:
    background: ad.Tensor  # w_b, (...,)
    point_mass: ad.Tensor  # a, (..., K)
    weights: ad.Tensor  # w', (..., K)


def background_probability(w, scores, b=5.0):
    """Compare the background token ``b`` with exp(w_i * tau_i) over the K points.

    Exponents are clamped to +-80; with w in [0, 1] that only bites for
    extreme scores, where the gradient is cut.
    """
    w = ad.as_tensor(w)
    scores = ad.as_tensor(scores, dtype=w.dtype)
    e = ad.exp(ad.clamp(ad.mul(w, scores), -CLAMP, CLAMP))
    eb = float(np.exp(min(b, CLAMP)))
    total = ad.sum(e, axis=-1, keepdims=True)
    denom = ad.add(total, eb)
    mass = ad.div(e, denom)
    background = ad.reshape(ad.div(ad.as_tensor(eb, dtype=w.dtype), denom), denom.shape[:-1])
    weights = ad.div(mass, ad.sum(mass, axis=-1, keepdims=True))
    return BackgroundTerms(background, mass, weights)


def aggregate(values, weights):
    """sum_i weights_i * values_i over the K axis. ``values`` (..., K, F), ``weights`` (..., K)."""
    values = ad.as_tensor(values)
    weights = ad.as_tensor(weights, dtype=values.dtype)
    wexp = ad.reshape(weights, weights.shape + (1,))
    return ad.sum(ad.mul(wexp, values), axis=-2)


def composite(rendered, background_prob, background_colour):
    """(1 - P) * rendered + P * I_b per pixel. ``background_prob`` is (H, W, 1)."""
    rendered = ad.as_tensor(rendered)
    p = ad.as_tensor(background_prob, dtype=rendered.dtype)
    ib = ad.as_tensor(np.asarray(background_colour, dtype=rendered.dtype))
    return ad.add(ad.mul(ad.sub(1.0, p), rendered), ad.mul(p, ib))
