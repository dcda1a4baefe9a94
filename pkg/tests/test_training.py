import csv

import numpy as np
import pytest

from pointattn import autodiff as ad
from pointattn.dataio import Checkpoint, checkpoint_bytes, generate_dataset
from pointattn.geometry import generate_rays
from pointattn.model import render
from pointattn.training import (
    PAPER_PERCEPTUAL_WEIGHT,
    AdamState,
    CimleConfig,
    SplatBaselineConfig,
    TrainConfig,
    _probe_camera,
    adam_step,
    cimle_finetune,
    compute_loss,
    gradient_flow_experiment,
    model_from_config,
    splat_contribution,
    train,
    write_gradflow_csv,
)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset("cube", n_views=4, resolution=8, seed=0)


def small_config(**kw):
    base = dict(k=4, n_points=24, init_mode="sphere", init_radius=1.2, renderer="tiny", iterations=5,
                log_interval=1, dtype="float64", prune_start=1, period=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- loss and optimizer ---------------------------------------------------


def test_loss_examples():
    gt = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert compute_loss(gt, gt).item() == 0.0
    assert compute_loss(np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.5)).item() == 0.25
    loss = compute_loss(np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.5), PAPER_PERCEPTUAL_WEIGHT,
                        perceptual=lambda p, g: 1.0)
    assert loss.item() == pytest.approx(0.26, abs=1e-15)
    with pytest.raises(ad.ShapeError):
        compute_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_adam_zero_gradient_leaves_params():
    p = {"a": np.arange(4.0)}
    state = adam_step(p, {"a": np.zeros(4)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["a"], np.arange(4.0))
    assert state.t == 1


def test_adam_first_step_bounded_by_lr():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p0 = rng.normal(size=10)
        p = {"x": p0.copy()}
        adam_step(p, {"x": rng.normal(scale=10.0 ** rng.uniform(-4, 4), size=10)}, AdamState(), 0.01)
        assert np.abs(p["x"] - p0).max() <= 0.01 * 1.01


def test_adam_quadratic_monotone():
    p = {"x": np.array([3.0, -2.0])}
    state = AdamState()
    losses = []
    for _ in range(100):
        losses.append(float(np.sum(p["x"] ** 2)))
        adam_step(p, {"x": 2 * p["x"]}, state, 0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_non_finite_names_group():
    with pytest.raises(FloatingPointError, match="positions"):
        adam_step({"points.positions": np.zeros(3)}, {"points.positions": np.array([0, np.nan, 0])},
                  AdamState(), 0.1)


def test_per_group_rates():
    p = {"points.positions": np.zeros(2), "points.scores": np.zeros(2)}
    rates = {"points.positions": 0.0, "points.scores": 0.5}
    adam_step(p, {k: np.ones(2) for k in p}, AdamState(), lambda n: rates[n])
    np.testing.assert_array_equal(p["points.positions"], 0.0)
    np.testing.assert_allclose(p["points.scores"], -0.5, rtol=1e-6)


# --- config ---------------------------------------------------------------


def test_config_validation_and_overrides():
    with pytest.raises(ValueError):
        TrainConfig(lr_positions=-1.0)
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig().updated({"k": "8", "lr_positions": "1e-3", "prune": "false", "background": "0,0,0"})
    assert cfg.k == 8 and cfg.lr_positions == 1e-3 and cfg.prune is False and cfg.background == (0, 0, 0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- training loop --------------------------------------------------------


def _arrays(model):
    return {k: v.copy() for k, v in model.arrays().items()}


def test_zero_iterations_returns_initialisation(tiny_data):
    cfg = small_config(iterations=0)
    res = train(tiny_data, cfg)
    init = model_from_config(cfg)
    for k, v in init.arrays().items():
        np.testing.assert_array_equal(res.model.arrays()[k], v)


def test_all_rates_zero_is_identity(tiny_data):
    cfg = small_config(lr_positions=0.0, lr_features=0.0, lr_scores=0.0, lr_networks=0.0, prune=False,
                       grow=False)
    before = _arrays(model_from_config(cfg))
    after = train(tiny_data, cfg).model.arrays()
    for k in before:
        np.testing.assert_array_equal(after[k], before[k])


def test_same_seed_bit_identical_checkpoints(tiny_data):
    cfg = small_config(iterations=6)
    blobs = []
    for _ in range(2):
        res = train(tiny_data, cfg)
        blobs.append(checkpoint_bytes(Checkpoint(res.model, cfg.to_dict(), res.adam)))
    assert blobs[0] == blobs[1]


def test_pruning_removes_exactly_negative_scores_and_regrows(tiny_data):
    cfg = small_config(iterations=2, lr_positions=0.0, lr_features=0.0, lr_scores=0.0, lr_networks=0.0,
                       prune_start=2, period=2)
    model = model_from_config(cfg)
    model.cloud.scores[[1, 5, 6]] = -0.5
    survivors = np.delete(model.cloud.positions, [1, 5, 6], axis=0)
    seen = {}
    res = train(tiny_data, cfg, model=model, callback=lambda it, m, info: seen.update(info))
    np.testing.assert_array_equal(seen["pruned"], [1, 5, 6])
    assert seen["grown"] == 1  # ceil(1% of 21)
    assert len(res.model.cloud) == 22
    np.testing.assert_array_equal(res.model.cloud.positions[:21], survivors)
    assert res.adam.m["points.positions"].shape == (22, 3)


def test_log_rows_and_csv(tiny_data, tmp_path):
    res = train(tiny_data, small_config(iterations=3, prune=False))
    assert [r.iteration for r in res.log] == [1, 2, 3]
    path = tmp_path / "metrics.csv"
    res.write_log(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iteration", "loss", "psnr", "points"] and len(rows) == 4


def test_loss_lower_after_200_iterations():
    data = generate_dataset("cube", n_views=8, resolution=16, seed=1)
    cfg = TrainConfig(k=8, n_points=128, init_radius=1.0, iterations=200, renderer="unet", dtype="float32",
                      lr_positions=2e-3, log_interval=1000, seed=0)

    def mean_loss(model):
        return np.mean([compute_loss(render(model, generate_rays(c), data.background).image, im).item()
                        for c, im in zip(data.cameras, data.images)])

    start = mean_loss(model_from_config(cfg))
    res = train(data, cfg)
    assert mean_loss(res.model) < start


# --- cIMLE ----------------------------------------------------------------


def test_cimle_selection_is_argmin(tiny_data):
    model = train(tiny_data, small_config(iterations=2, prune=False)).model
    events = []
    cimle_finetune(tiny_data, model, CimleConfig(samples=5, outer=3, inner=2),
                   on_select=lambda i, codes, d, sel: events.append((i, codes.copy(), d.copy(), sel)))
    assert len(events) == 3 * len(tiny_data)
    for _, codes, d, sel in events:
        assert codes.shape == (5, 128)
        assert sel == int(np.argmin(d))


def test_cimle_single_sample_picks_zero(tiny_data):
    model = train(tiny_data, small_config(iterations=1, prune=False)).model
    picks = []
    cimle_finetune(tiny_data, model, CimleConfig(samples=1, outer=2, inner=1),
                   on_select=lambda i, c, d, sel: picks.append(sel))
    assert set(picks) == {0}
    with pytest.raises(ValueError):
        cimle_finetune(tiny_data, model, CimleConfig(samples=0))


# --- splats and gradient flow ---------------------------------------------


def test_splat_contribution_examples():
    cam = _probe_camera()
    f = cam.focal
    soft = SplatBaselineConfig(sigma=1.0)
    hard = SplatBaselineConfig(radius=1.0, mode="hard")
    at = lambda d: np.array([d * 4.0 / f, 0.0, 0.0])  # noqa: E731
    assert splat_contribution(at(0.0), (0.5, 0.5), cam, soft).item() == pytest.approx(1.0, abs=1e-12)
    assert splat_contribution(at(3.0), (0.5, 0.5), cam, soft).item() == pytest.approx(np.exp(-4.5), rel=1e-9)
    assert abs(np.exp(-4.5) - 0.01111) < 1e-5
    assert splat_contribution(at(1.0 + 1e-6), (0.5, 0.5), cam, hard).item() == 0.0
    assert splat_contribution(at(0.5), (0.5, 0.5), cam, hard).item() == 1.0
    with pytest.raises(ValueError):
        SplatBaselineConfig(sigma=0.0)


def test_splat_contribution_gradient_decreases_beyond_sigma():
    cam = _probe_camera()
    cfg = SplatBaselineConfig(sigma=1.0)
    norms = []
    for d in np.linspace(1.0, 10.0, 37):
        _, g = ad.gradient(lambda p: splat_contribution(p, (0.5, 0.5), cam, cfg),
                           np.array([d * 4.0 / cam.focal, 0.0, 0.0]))
        norms.append(np.linalg.norm(g))
    assert all(b <= a for a, b in zip(norms, norms[1:]))


def test_gradient_flow_rows(tmp_path):
    rows = gradient_flow_experiment([1, 2, 4, 6, 8, 10])
    assert rows[-1].splat_grad_norm < 1e-8 and rows[-1].attention_grad_norm > 1e-6
    assert all(r.hard_grad_norm == 0.0 for r in rows)
    path = tmp_path / "g.csv"
    write_gradflow_csv(rows, path)
    header = next(csv.reader(open(path)))
    assert header == ["distance", "splat_grad_norm", "attention_grad_norm", "hard_splat_grad_norm"]
    with pytest.raises(ValueError):
        gradient_flow_experiment([])
