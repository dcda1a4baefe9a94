"""Loss, Adam, the training loop with pruning/growing, cIMLE finetuning and the
splat-vs-attention gradient-flow study."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig
from .geometry import Camera, generate_rays, look_at
from .metrics import psnr
from .model import Model, add_modulator, feature_pass, init_model, render
from .pointscene import PointCloud, SceneEmptiedError, grow_points, prune_points
from .renderer import LATENT_DIM, modulate, render_features

logger = logging.getLogger(__name__)

PAPER_PERCEPTUAL_WEIGHT = 0.01


@dataclass
class TrainConfig:
    k: int = 20
    feature_dim: int = 64
    perceptual_weight: float = 0.0
    background_token: float = 5.0
    lr_positions: float = 2e-4
    lr_features: float = 5e-4
    lr_scores: float = 1e-3
    lr_networks: float = 5e-4
    iterations: int = 2000
    prune_start: int = 600
    period: int = 200
    prune: bool = True
    grow: bool = True
    n_points: int = 512
    target_points: int = 0  # 0 means "the initial point count"
    init_mode: str = "sphere"
    init_radius: float = 1.0
    renderer: str = "unet"
    aggregation: str = "foreground"
    n_bands: int = 6
    include_last_band: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    log_interval: int = 50
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_positions", "lr_features", "lr_scores", "lr_networks"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig: {name} must be >= 0")
        if self.period < 1:
            raise ValueError("TrainConfig: period must be >= 1")
        if self.k < 1:
            raise ValueError("TrainConfig: k must be >= 1")
        self.background = tuple(float(v) for v in self.background)

    def attention_config(self):
        return AttentionConfig(feature_dim=self.feature_dim, background_token=self.background_token,
                               aggregation=self.aggregation, n_bands=self.n_bands,
                               include_last_band=self.include_last_band)

    def group_rates(self):
        return {"positions": self.lr_positions, "features": self.lr_features,
                "scores": self.lr_scores, "networks": self.lr_networks}

    def to_dict(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def updated(self, overrides):
        """Copy with ``overrides`` (strings are parsed to each field's type)."""
        d = self.to_dict()
        for key, value in overrides.items():
            if key not in d:
                raise KeyError(f"unknown config key: {key}")
            d[key] = _coerce(key, value, d[key])
        return TrainConfig.from_dict(d)


def _coerce(key, value, current):
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config {key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, (list, tuple)):
        return [float(v) for v in value.split(",")]
    return value


def param_group(name):
    if name == "points.positions":
        return "positions"
    if name == "points.features":
        return "features"
    if name == "points.scores":
        return "scores"
    return "networks"


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------


def compute_loss(pred, gt, perceptual_weight=0.0, perceptual=None):
    """MSE plus ``perceptual_weight * perceptual(pred, gt)`` when a perceptual plugin is given."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"compute_loss: prediction {pred.shape} vs target {gt.shape}")
    loss = ad.mean(ad.square(ad.sub(pred, gt)))
    if perceptual is not None and perceptual_weight:
        loss = ad.add(loss, ad.scale(ad.as_tensor(perceptual(pred, gt), dtype=pred.dtype), perceptual_weight))
    return loss


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """One in-place Adam update with bias correction.

    ``lr`` is a float or a callable mapping a parameter name to its rate.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in group {param_group(name)!r} ({name})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        rate = lr(name) if callable(lr) else lr
        if rate:
            p -= (rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def _reindex_state(state: AdamState, keep=None, n_new=0):
    for name in ("points.positions", "points.features", "points.scores"):
        for buf in (state.m, state.v):
            if name not in buf:
                continue
            a = buf[name]
            if keep is not None:
                a = a[keep]
            if n_new:
                a = np.concatenate([a, np.zeros((n_new,) + a.shape[1:], dtype=a.dtype)])
            buf[name] = a


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    iteration: int
    loss: float
    psnr: float
    points: int


@dataclass
class TrainResult:
    model: Model
    config: TrainConfig
    adam: AdamState
    rng: np.random.Generator
    log: list

    def write_log(self, path):
        write_metrics_csv(self.log, path)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr", "points"])
        for r in rows:
            writer.writerow([r.iteration, f"{r.loss:.8g}", f"{r.psnr:.6g}", r.points])


def model_from_config(config: TrainConfig):
    dtype = np.dtype(config.dtype)
    return init_model(config.n_points, config.init_mode, config.init_radius, k=config.k,
                      attention=config.attention_config(), renderer=config.renderer,
                      seed=config.seed, dtype=dtype)


def train(dataset, config: TrainConfig, model: Optional[Model] = None, perceptual=None,
          callback: Optional[Callable] = None, state: Optional[AdamState] = None,
          rng: Optional[np.random.Generator] = None, start_iteration=0):
    """Optimize every parameter group on one randomly drawn view per iteration.

    From ``prune_start`` on, every ``period`` iterations points with negative
    score are pruned and, while below the target count, new points are grown.
    ``callback(iteration, model, info)`` is invoked after each step.
    """
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    model = model_from_config(config) if model is None else model
    target = config.target_points or len(model.cloud)
    state = state or AdamState()
    rng = rng or np.random.default_rng(config.seed)
    rates = config.group_rates()
    lr = lambda name: rates[param_group(name)]  # noqa: E731
    rays = [generate_rays(cam) for cam in dataset.cameras]
    background = np.asarray(dataset.background if dataset.background is not None else config.background)
    names = [n for n in model.arrays() if not n.startswith("mod.")]
    log = []

    for it in range(start_iteration + 1, start_iteration + config.iterations + 1):
        view = int(rng.integers(len(dataset)))
        gt = dataset.images[view].astype(model.dtype)
        leaves = model.leaf_tensors(names)
        with ad.Tape() as tape:
            out = render(model, rays[view], background, leaves=leaves)
            loss = compute_loss(out.image, gt, config.perceptual_weight, perceptual)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"train: non-finite loss at iteration {it}")
            tape.backward(loss)
        grads = {n: leaves[n].grad for n in names}
        adam_step(model.arrays(), grads, state, lr)

        info = {"loss": loss.item(), "view": view}
        if it == start_iteration + 1 or it % config.log_interval == 0:
            row = LogRow(it, loss.item(), psnr(out.image.data, gt), len(model.cloud))
            log.append(row)
            logger.info("iter %d loss %.5f psnr %.2f points %d", row.iteration, row.loss, row.psnr, row.points)

        if it >= config.prune_start and it % config.period == 0:
            if config.prune:
                try:
                    cloud, removed = prune_points(model.cloud)
                except SceneEmptiedError as exc:
                    raise SceneEmptiedError(f"train: iteration {it}: {exc}") from None
                if removed.size:
                    keep = np.ones(len(model.cloud), dtype=bool)
                    keep[removed] = False
                    model.cloud = cloud
                    _reindex_state(state, keep=keep)
                info["pruned"] = removed
            if config.grow and len(model.cloud) < target and len(model.cloud) >= 11:
                n_new = min(max(1, math.ceil(0.01 * len(model.cloud))), target - len(model.cloud))
                model.cloud = grow_points(model.cloud, n_new, seed=int(rng.integers(2 ** 31)))
                _reindex_state(state, n_new=n_new)
                info["grown"] = n_new
        if callback is not None:
            callback(it, model, info)

    return TrainResult(model, config, state, rng, log)


# ---------------------------------------------------------------------------
# cIMLE exposure finetuning
# ---------------------------------------------------------------------------


@dataclass
class CimleConfig:
    samples: int = 8  # m
    outer: int = 10
    inner: int = 50
    lr: float = 5e-4
    batch: int = 0  # 0 means every example per outer step
    mini_batch: int = 2
    train_renderer: bool = False
    seed: int = 0


def _latent_render(model, fmap, background, bg_colour, z, leaves=None):
    leaves = leaves or {}
    mod = {n: leaves.get(n, ad.Tensor(a)) for n, a in model.modulator.items()}
    rparams = {n: leaves.get(n, ad.Tensor(a)) for n, a in model.params.items()}
    rgb = render_features(modulate(fmap, z, mod), rparams)
    p = background
    return ad.add(ad.mul(ad.sub(1.0, p), rgb), ad.mul(p, np.asarray(bg_colour, dtype=model.dtype)))


def cimle_finetune(dataset, model: Model, cfg: CimleConfig = None, on_select: Optional[Callable] = None):
    """Conditional IMLE: fit the latent modulator against the best of ``samples`` codes per example.

    Feature maps come from the frozen point cloud and attention networks.
    ``on_select(example, codes, distances, chosen)`` observes every selection.
    """
    cfg = cfg or CimleConfig()
    if cfg.samples < 1:
        raise ValueError("cimle_finetune: need at least one latent sample (m >= 1)")
    model = add_modulator(model, seed=cfg.seed + 7)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.dtype
    bg_colour = np.asarray(dataset.background, dtype=dtype)
    maps = []
    for cam in dataset.cameras:
        fmap, background, _ = feature_pass(model, generate_rays(cam))
        maps.append((ad.Tensor(fmap.data), ad.Tensor(background.data)))
    targets = [img.astype(dtype) for img in dataset.images]
    n = len(maps)
    names = list(model.modulator)
    if cfg.train_renderer:
        names += [k for k in model.params if not k.startswith("attn.")]
    state = AdamState()
    arrays = model.arrays()

    for _ in range(cfg.outer):
        batch = np.arange(n) if not cfg.batch or cfg.batch >= n else \
            np.sort(rng.choice(n, size=cfg.batch, replace=False))
        chosen = {}
        for i in batch:
            codes = rng.normal(size=(cfg.samples, LATENT_DIM)).astype(dtype)
            fmap, background = maps[i]
            dists = np.array([
                float(np.mean((_latent_render(model, fmap, background, bg_colour, z).data - targets[i]) ** 2))
                for z in codes])
            sel = int(np.argmin(dists))
            chosen[int(i)] = codes[sel]
            if on_select is not None:
                on_select(int(i), codes, dists, sel)
        for _ in range(cfg.inner):
            size = min(cfg.mini_batch, len(batch)) if cfg.mini_batch else len(batch)
            mb = rng.choice(batch, size=size, replace=False)
            leaves = {nm: ad.Tensor(arrays[nm], requires_grad=True) for nm in names}
            with ad.Tape() as tape:
                total = None
                for i in mb:
                    fmap, background = maps[i]
                    pred = _latent_render(model, fmap, background, bg_colour, chosen[int(i)], leaves)
                    d = compute_loss(pred, targets[i])
                    total = d if total is None else ad.add(total, d)
                loss = ad.scale(total, 1.0 / len(mb))
                tape.backward(loss)
            adam_step(arrays, {nm: leaves[nm].grad for nm in names}, state, cfg.lr)
    return model


def render_latent(model, camera, z, background_colour=(1.0, 1.0, 1.0)):
    return render(model, camera, background_colour, latent=z).image.data


# ---------------------------------------------------------------------------
# splat baseline and gradient-flow study
# ---------------------------------------------------------------------------


@dataclass
class SplatBaselineConfig:
    sigma: float = 1.0  # kernel std, pixels
    radius: float = 1.0  # hard splat radius, pixels
    mode: str = "soft"  # soft | hard

    def __post_init__(self):
        if self.sigma <= 0 or self.radius <= 0:
            raise ValueError("SplatBaselineConfig: sigma and radius must be positive")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"SplatBaselineConfig: unknown mode {self.mode!r}")


def project_point(point, camera: Camera):
    """Differentiable pinhole projection of one world point to pixel coordinates (2,)."""
    p = ad.as_tensor(point)
    rot = camera.rotation.astype(p.dtype)
    cam = ad.matmul(ad.reshape(ad.sub(p, camera.center.astype(p.dtype)), (1, 3)), rot)
    x = ad.take(ad.reshape(cam, (3,)), [0])
    y = ad.take(ad.reshape(cam, (3,)), [1])
    depth = ad.scale(ad.take(ad.reshape(cam, (3,)), [2]), -1.0)
    f = camera.focal
    u = ad.add(ad.scale(ad.div(x, depth), f), 0.5 * camera.width)
    v = ad.add(ad.scale(ad.div(y, depth), -f), 0.5 * camera.height)
    return ad.concat([u, v], axis=0)


def splat_contribution(point, pixel, camera: Camera, cfg: SplatBaselineConfig):
    """Contribution in [0, 1] of a splat centred at ``point`` to pixel centre ``pixel`` (x, y)."""
    uv = project_point(point, camera)
    diff = ad.sub(uv, np.asarray(pixel, dtype=uv.dtype))
    d2 = ad.sum(ad.square(diff))
    if cfg.mode == "hard":
        return ad.Tensor(np.asarray(1.0 if np.sqrt(d2.item()) <= cfg.radius else 0.0, dtype=uv.dtype))
    return ad.exp(ad.scale(d2, -0.5 / cfg.sigma ** 2))


@dataclass
class GradFlowRow:
    distance: float  # pixels
    splat_grad_norm: float
    attention_grad_norm: float
    hard_grad_norm: float


def _probe_camera(fov=0.2):
    return Camera(look_at((0.0, 0.0, 4.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)), fov, 1, 1)


def gradient_flow_experiment(distances, cfg: SplatBaselineConfig = None, seed=0, target=0.0,
                             point_colour=0.0, background_colour=1.0, k=1):
    """Position-gradient norm of a one-pixel loss for a point ``d`` pixels from that pixel.

    Compares a soft (and hard) splat renderer with the proximity-attention
    pipeline using the tiny renderer. The pixel target differs from the
    background, so the pixel error is large wherever the point is.
    """
    distances = list(distances)
    if not distances:
        raise ValueError("gradient_flow_experiment: empty distance sweep")
    cfg = cfg or SplatBaselineConfig()
    hard_cfg = SplatBaselineConfig(cfg.sigma, cfg.radius, "hard")
    camera = _probe_camera()
    depth = 4.0
    pixel = (0.5, 0.5)
    attn_cfg = AttentionConfig()
    model = init_model(1, "sphere", 1.0, k=k, attention=attn_cfg, renderer="tiny", seed=seed)
    rays = generate_rays(camera)
    rows = []
    for d in distances:
        world = np.array([d * depth / camera.focal, 0.0, 0.0])

        def splat_loss(p, c=cfg):
            contrib = splat_contribution(p, pixel, camera, c)
            pred = ad.add(ad.scale(contrib, point_colour), ad.scale(ad.sub(1.0, contrib), background_colour))
            return ad.square(ad.sub(pred, target))

        _, g_soft = ad.gradient(splat_loss, world)
        _, g_hard = ad.gradient(lambda p: splat_loss(p, hard_cfg), world)

        probe = model.with_cloud(PointCloud(world[None, :].copy(), model.cloud.features.copy(),
                                            model.cloud.scores.copy()))

        def attn_loss(p):
            leaves = {"points.positions": ad.reshape(p, (1, 3))}
            img = render(probe, rays, (background_colour,) * 3, leaves=leaves).image
            return ad.mean(ad.square(ad.sub(img, target)))

        _, g_attn = ad.gradient(attn_loss, world)
        rows.append(GradFlowRow(float(d), float(np.linalg.norm(g_soft)), float(np.linalg.norm(g_attn)),
                                float(np.linalg.norm(g_hard))))
    return rows


def write_gradflow_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "splat_grad_norm", "attention_grad_norm", "hard_splat_grad_norm"])
        for r in rows:
            writer.writerow([f"{r.distance:.6g}", f"{r.splat_grad_norm:.6e}", f"{r.attention_grad_norm:.6e}",
                             f"{r.hard_grad_norm:.6e}"])
