"""Pinhole cameras, rays and the ray-dependent point embedding."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad


@dataclass
class Camera:
    """Pinhole camera. ``c2w`` maps camera to world; the camera looks down its -z axis."""

    c2w: np.ndarray
    fov_x: float
    height: int
    width: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError(f"camera: c2w must be 4x4, got {self.c2w.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"camera: resolution must be positive, got {self.height}x{self.width}")
        if not 0.0 < self.fov_x < np.pi:
            raise ValueError(f"camera: fov_x must lie in (0, pi), got {self.fov_x}")
        if abs(np.linalg.det(self.c2w[:3, :3])) < 1e-9:
            raise ValueError("camera: degenerate (non-invertible) extrinsics")

    @property
    def center(self):
        return self.c2w[:3, 3].copy()

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def focal(self):
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    def orthonormality_error(self):
        r = self.rotation
        return float(np.abs(r.T @ r - np.eye(3)).max())

    def project(self, points):
        """World points (N, 3) to pixel coordinates (N, 2) as (x right, y down)."""
        cam = (np.asarray(points) - self.center) @ self.rotation
        depth = -cam[:, 2]
        u = self.focal * cam[:, 0] / depth + 0.5 * self.width
        v = -self.focal * cam[:, 1] / depth + 0.5 * self.height
        return np.stack([u, v], axis=1)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(forward, up)) > 1.0 - 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


@dataclass
class Rays:
    origins: np.ndarray  # (H*W, 3)
    dirs: np.ndarray  # (H*W, 3), unit length
    height: int
    width: int

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera) -> Rays:
    """One ray per pixel centre, row-major from the top-left pixel."""
    h, w = camera.height, camera.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    f = camera.focal
    local = np.stack([(xs - 0.5 * w) / f, -(ys - 0.5 * h) / f, -np.ones_like(xs)], axis=-1)
    dirs = local.reshape(-1, 3) @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return Rays(origins, dirs, h, w)


@dataclass
class RayPointGeometry:
    projection: ad.Tensor  # p'
    along: ad.Tensor  # s = p' - o
    perp: ad.Tensor  # t = p - p'
    depth: ad.Tensor  # <p - o, d>

    @property
    def perp_distance(self):
        return ad.norm(self.perp)


def ray_point_embed(p, origin, direction):
    """Project points onto rays and split ``p - o`` into along/perpendicular parts.

    Shapes broadcast over leading axes, e.g. ``p`` (R, K, 3) with ``origin`` and
    ``direction`` (R, 1, 3).
    """
    p = ad.as_tensor(p)
    o = ad.as_tensor(origin, dtype=p.dtype)
    d = ad.as_tensor(direction, dtype=p.dtype)
    v = p - o
    depth = ad.inner(v, d)
    along = ad.mul(ad.reshape(depth, depth.shape + (1,)), d)
    proj = o + along
    perp = p - proj
    return RayPointGeometry(proj, along, perp, depth)


def encoding_size(n, n_bands=6, include_last=True):
    return 2 * (n_bands + (1 if include_last else 0)) * n


def positional_encode(x, n_bands=6, include_last=True):
    """Per coordinate ``[sin(2^l pi x), cos(2^l pi x)]`` for l = 0..n_bands (coordinate-major).

    With ``include_last=False`` the bands run 0..n_bands-1.
    """
    x = ad.as_tensor(x)
    n_freq = n_bands + 1 if include_last else n_bands
    freqs = (2.0 ** np.arange(n_freq) * np.pi).astype(x.dtype)
    lead = x.shape
    scaled = ad.mul(ad.reshape(x, lead + (1, 1)), freqs.reshape(n_freq, 1))
    both = ad.concat([ad.sin(scaled), ad.cos(scaled)], axis=-1)
    return ad.reshape(both, lead[:-1] + (lead[-1] * n_freq * 2,))


def select_top_k(positions, origins, dirs, k):
    """Indices (R, min(k, N)) of the points nearest to each ray by perpendicular distance.

    Sorted by distance, ties towards the lower index. Selection is not
    differentiable; gradients flow through the gathered geometry only.
    """
    positions = np.asarray(positions)
    if positions.shape[0] == 0:
        raise ValueError("select_top_k: empty point cloud")
    if k < 1:
        raise ValueError(f"select_top_k: K must be >= 1, got {k}")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    return _kernels.topk_perpendicular(positions, origins, dirs, k)
