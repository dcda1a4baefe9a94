import numpy as np
import pytest

from pointattn import autodiff as ad
from pointattn.attention import (
    CLAMP,
    AttentionConfig,
    aggregate,
    attention_weights,
    background_probability,
    composite,
    compute_kvq,
    init_attention_params,
)
from pointattn.geometry import positional_encode, ray_point_embed

TRIALS = 10_000


def _inputs(cfg, r=3, k=5, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(r, k, 3))
    o = rng.normal(size=(r, 1, 3))
    d = rng.normal(size=(r, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    geom = ray_point_embed(pts, o, d[:, None, :])
    enc = positional_encode(pts, cfg.n_bands, cfg.include_last_band)
    feats = rng.normal(size=(r, k, cfg.feature_dim))
    return geom, enc, feats, d, pts, o


def test_mlp_input_dims():
    dims = AttentionConfig().input_dims()
    assert dims == {"key": 126, "value": 148, "query": 42}
    params = init_attention_params(AttentionConfig())
    assert params["attn.key.0.W"].shape == (126, 64)
    assert params["attn.value.0.W"].shape == (148, 64)
    assert params["attn.query.0.W"].shape == (42, 64)
    assert params["attn.key.2.W"].shape == (64, 32)
    assert params["attn.value.2.W"].shape == (64, 32)


def test_zero_weights_give_zero_outputs():
    cfg = AttentionConfig()
    params = {k: np.zeros_like(v) for k, v in init_attention_params(cfg).items()}
    geom, enc, feats, d, *_ = _inputs(cfg)
    keys, values, queries = compute_kvq(geom, enc, feats, d, params, cfg)
    assert keys.shape == (3, 5, 32) and values.shape == (3, 5, 32) and queries.shape == (3, 32)
    for t in (keys, values, queries):
        assert np.all(t.data == 0)


def test_permuting_points_permutes_keys_and_values():
    cfg = AttentionConfig()
    params = init_attention_params(cfg, seed=1)
    geom, enc, feats, d, pts, o = _inputs(cfg, seed=2)
    perm = np.array([3, 0, 4, 1, 2])
    keys, values, _ = compute_kvq(geom, enc, feats, d, params, cfg)
    geom_p = ray_point_embed(pts[:, perm], o, d[:, None, :])
    keys_p, values_p, _ = compute_kvq(geom_p, enc.data[:, perm], feats[:, perm], d, params, cfg)
    np.testing.assert_allclose(keys_p.data, keys.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(values_p.data, values.data[:, perm], atol=1e-12)


def test_feature_dim_mismatch_rejected():
    cfg = AttentionConfig()
    geom, enc, feats, d, *_ = _inputs(cfg)
    with pytest.raises(ad.ShapeError):
        compute_kvq(geom, enc, feats[..., :10], d, init_attention_params(cfg), cfg)


def test_attention_weight_examples():
    rng = np.random.default_rng(3)
    np.testing.assert_array_equal(attention_weights(rng.normal(size=(1, 8)), rng.normal(size=8)).data, [1.0])
    same = np.tile(rng.normal(size=8), (6, 1))
    np.testing.assert_allclose(attention_weights(same, rng.normal(size=8)).data, np.full(6, 1 / 6), rtol=1e-14)
    # mu = 4 so logits are <q,k>/2: keys chosen to give scaled logits [5, 0]
    keys = np.array([[10.0, 0, 0, 0], [0.0, 0, 0, 0]])
    w = attention_weights(keys, np.array([1.0, 0, 0, 0])).data
    np.testing.assert_allclose(w, [0.99331, 0.00669], atol=5e-6)


def test_weights_normalised_even_for_far_points():
    rng = np.random.default_rng(4)
    for scale in (1.0, 1e3, 1e6):
        keys = rng.normal(scale=scale, size=(200, 7, 16))
        w = attention_weights(keys, rng.normal(size=(200, 16))).data
        assert np.all(np.isfinite(w))
        assert np.abs(w.sum(-1) - 1).max() < 1e-12
        assert np.all(w.max(-1) >= 1 / 7 - 1e-15)


def test_algebraic_identities_randomised():
    rng = np.random.default_rng(5)
    k = rng.integers(1, 21, size=TRIALS)
    worst_w = worst_b = worst_wp = worst_closed = 0.0
    for kk in np.unique(k):
        n = int((k == kk).sum())
        keys = rng.normal(scale=2, size=(n, kk, 8))
        q = rng.normal(scale=2, size=(n, 8))
        w = attention_weights(keys, q)
        tau = rng.normal(scale=3, size=(n, kk))
        terms = background_probability(w, tau, 5.0)
        worst_w = max(worst_w, np.abs(w.data.sum(-1) - 1).max())
        worst_b = max(worst_b, np.abs(terms.background.data + terms.point_mass.data.sum(-1) - 1).max())
        worst_wp = max(worst_wp, np.abs(terms.weights.data.sum(-1) - 1).max())
        zero = background_probability(w, np.zeros((n, kk)), 5.0).background.data
        worst_closed = max(worst_closed, np.abs(zero - np.exp(5) / (np.exp(5) + kk)).max())
    assert worst_w < 1e-6 and worst_b < 1e-6 and worst_wp < 1e-6 and worst_closed < 1e-9


def test_background_probability_examples():
    w = np.full(20, 1 / 20)
    terms = background_probability(w, np.zeros(20), 5.0)
    assert abs(terms.background.item() - np.exp(5) / (np.exp(5) + 20)) < 1e-12
    assert abs(terms.background.item() - 0.88125) < 1e-5  # quoted to five digits
    np.testing.assert_allclose(terms.weights.data, np.full(20, 1 / 20), rtol=1e-14)


def test_background_probability_saturates_under_clamp():
    terms = background_probability(np.array([1.0]), np.array([100.0]), 5.0)
    # exponent clamped to 80, so w_b = e^5 / (e^80 + e^5) = e^-75 rather than e^-95
    expected = np.exp(5.0) / (np.exp(CLAMP) + np.exp(5.0))
    assert terms.background.item() == pytest.approx(expected, rel=1e-12)
    assert terms.background.item() < 1e-32
    low = background_probability(np.array([1.0]), np.array([-1000.0]), 5.0)
    assert low.background.item() == pytest.approx(1.0, abs=1e-30) and np.isfinite(low.weights.data).all()


def test_aggregate_examples():
    rng = np.random.default_rng(6)
    values = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(aggregate(values, np.eye(5)[2]).data, values[2])
    v0 = rng.normal(size=4)
    w = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(aggregate(np.tile(v0, (5, 1)), w).data, v0, atol=1e-14)
    vals = rng.normal(size=(3, 6, 5, 4))
    ws = rng.dirichlet(np.ones(5), size=(3, 6))
    brute = np.zeros((3, 6, 4))
    for i in range(5):
        brute += ws[..., i:i + 1] * vals[..., i, :]
    np.testing.assert_allclose(aggregate(vals, ws).data, brute, atol=1e-14)


def test_composite_examples():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(4, 4, 3))
    bg = np.array([0.2, 0.4, 0.6])
    np.testing.assert_allclose(composite(img, np.ones((4, 4, 1)), bg).data, np.broadcast_to(bg, (4, 4, 3)))
    np.testing.assert_array_equal(composite(img, np.zeros((4, 4, 1)), bg).data, img)
    np.testing.assert_allclose(composite(np.zeros((2, 2, 3)), np.full((2, 2, 1), 0.5), np.ones(3)).data, 0.5)


def test_background_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    w = rng.dirichlet(np.ones(6))
    c = rng.normal(size=6)

    def f(tau):
        t = background_probability(w, tau, 5.0)
        return ad.add(ad.sum(ad.mul(t.weights, c)), t.background)

    for _ in range(10):
        assert ad.finite_diff_check(f, rng.normal(scale=2, size=6)) < 1e-6
