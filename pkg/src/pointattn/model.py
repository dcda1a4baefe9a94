"""Full rendering pipeline: point cloud -> proximity attention -> feature map -> image."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionConfig,
    aggregate,
    attention_weights,
    background_probability,
    composite,
    compute_kvq,
    init_attention_params,
)
from .geometry import Camera, Rays, generate_rays, positional_encode, ray_point_embed, select_top_k
from .pointscene import PointCloud, init_point_cloud
from .renderer import init_modulator, init_renderer, modulate, render_features

POINT_KEYS = ("points.positions", "points.features", "points.scores")


@dataclass
class Model:
    cloud: PointCloud
    params: dict  # attention MLPs and renderer, name -> array
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    k: int = 20
    modulator: Optional[dict] = None

    @property
    def dtype(self):
        return self.cloud.positions.dtype

    def arrays(self):
        """Every learnable array by name. Point arrays are views into ``cloud``."""
        out = {
            "points.positions": self.cloud.positions,
            "points.features": self.cloud.features,
            "points.scores": self.cloud.scores,
        }
        out.update(self.params)
        if self.modulator is not None:
            out.update(self.modulator)
        return out

    def leaf_tensors(self, names=None):
        arrays = self.arrays()
        names = arrays.keys() if names is None else names
        return {n: ad.Tensor(arrays[n], requires_grad=True) for n in names}

    def astype(self, dtype):
        return Model(
            self.cloud.astype(dtype),
            {k: v.astype(dtype) for k, v in self.params.items()},
            self.attention,
            self.k,
            None if self.modulator is None else {k: v.astype(dtype) for k, v in self.modulator.items()},
        )

    def copy(self):
        return self.astype(self.dtype)

    def with_cloud(self, cloud):
        return Model(cloud, self.params, self.attention, self.k, self.modulator)


def init_model(n_points=512, init_mode="sphere", init_radius=1.0, k=20, attention=None,
               renderer="unet", seed=0, dtype=np.float64, with_modulator=False):
    attention = attention or AttentionConfig()
    cloud = init_point_cloud(init_mode, n_points, init_radius, seed=seed,
                             feature_dim=attention.feature_dim, dtype=dtype)
    params = init_attention_params(attention, seed=seed + 1, dtype=dtype)
    params.update(init_renderer(renderer, attention.value_dim, seed=seed + 2, dtype=dtype))
    modulator = init_modulator(attention.value_dim, seed=seed + 3, dtype=dtype) if with_modulator else None
    return Model(cloud, params, attention, k, modulator)


@dataclass
class RenderOutput:
    image: ad.Tensor  # (H, W, 3) composited
    rgb: ad.Tensor  # (H, W, 3) renderer output before compositing
    background: ad.Tensor  # (H, W, 1) background probability
    feature_map: ad.Tensor  # (H, W, d_feat)
    indices: np.ndarray  # (R, K) selected points per ray
    weights: ad.Tensor  # (R, K) aggregation weights
    depth: np.ndarray  # (R, K) along-ray depth of the selected points

    def depth_map(self):
        """Aggregation-weighted along-ray depth, masked by the foreground probability."""
        h, w = self.background.shape[:2]
        d = (self.weights.data * self.depth).sum(axis=1).reshape(h, w)
        return d * (1.0 - self.background.data[..., 0])


def _rays(view):
    return generate_rays(view) if isinstance(view, Camera) else view


def feature_pass(model: Model, view, leaves=None):
    """Everything up to the feature map: returns (feature_map, background (H, W, 1), extras)."""
    rays: Rays = _rays(view)
    leaves = leaves or {}
    arrays = model.arrays()

    def get(name):
        return leaves[name] if name in leaves else ad.Tensor(arrays[name])

    params = {n: get(n) for n in model.params}
    pos = get("points.positions")
    feats = get("points.features")
    scores = get("points.scores")
    dtype = model.dtype
    cfg = model.attention

    idx, _ = select_top_k(pos.data, rays.origins, rays.dirs, model.k)
    n_rays, k = idx.shape
    origins = rays.origins[:, None, :].astype(dtype)
    dirs = rays.dirs.astype(dtype)
    sel_pos = ad.take(pos, idx)
    geom = ray_point_embed(sel_pos, origins, dirs[:, None, :])
    point_enc = ad.take(positional_encode(pos, cfg.n_bands, cfg.include_last_band), idx)
    keys, values, queries = compute_kvq(geom, point_enc, ad.take(feats, idx), dirs, params, cfg)
    w = attention_weights(keys, queries)
    bg = background_probability(w, ad.take(scores, idx), cfg.background_token)
    agg_w = bg.weights if cfg.aggregation == "foreground" else w
    f = aggregate(values, agg_w)
    fmap = ad.reshape(f, (rays.height, rays.width, f.shape[-1]))
    background = ad.reshape(bg.background, (rays.height, rays.width, 1))
    return fmap, background, (idx, agg_w, geom.depth.data)


def render(model: Model, view, background_colour=(1.0, 1.0, 1.0), leaves=None, latent=None):
    """Render a camera (or precomputed rays). ``leaves`` maps array names to tensors to differentiate."""
    leaves = leaves or {}
    fmap, background, (idx, agg_w, depth) = feature_pass(model, view, leaves)
    if latent is not None:
        if model.modulator is None:
            raise ValueError("render: a latent code needs a modulator")
        mod = {n: leaves.get(n, ad.Tensor(a)) for n, a in model.modulator.items()}
        fmap = modulate(fmap, np.asarray(latent, dtype=model.dtype), mod)
    rparams = {n: leaves.get(n, ad.Tensor(a)) for n, a in model.params.items()}
    rgb = render_features(fmap, rparams)
    image = composite(rgb, background, np.asarray(background_colour, dtype=model.dtype))
    return RenderOutput(image, rgb, background, fmap, idx, agg_w, depth)


def add_modulator(model: Model, seed=0):
    if model.modulator is None:
        model.modulator = init_modulator(model.attention.value_dim, seed=seed, dtype=model.dtype)
    return model
