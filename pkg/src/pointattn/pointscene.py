"""The learnable point cloud and the procedures that reshape it."""

import math
import shlex
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels


class SceneEmptiedError(RuntimeError):
    """Raised when an operation would leave the scene with no points."""


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, h)
    scores: np.ndarray  # (N,)

    def __post_init__(self):
        n = self.positions.shape[0]
        if n < 1:
            raise SceneEmptiedError("point cloud must contain at least one point")
        if self.positions.shape != (n, 3) or self.features.shape[0] != n or self.scores.shape != (n,):
            raise ValueError(
                f"point cloud arrays disagree: positions {self.positions.shape}, "
                f"features {self.features.shape}, scores {self.scores.shape}")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def copy(self):
        return PointCloud(self.positions.copy(), self.features.copy(), self.scores.copy())

    def subset(self, keep):
        return PointCloud(self.positions[keep].copy(), self.features[keep].copy(), self.scores[keep].copy())

    def astype(self, dtype):
        return PointCloud(self.positions.astype(dtype), self.features.astype(dtype), self.scores.astype(dtype))


def init_point_cloud(mode, n, radius=1.0, seed=0, feature_dim=64, feature_std=0.1, dtype=np.float64):
    """Seeded initial cloud: points on a sphere or uniform in a cube, zero scores."""
    if n < 1:
        raise ValueError(f"init_point_cloud: N must be >= 1, got {n}")
    if radius <= 0:
        raise ValueError(f"init_point_cloud: radius must be positive, got {radius}")
    rng = np.random.default_rng(seed)
    if mode == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pos = radius * v
    elif mode in ("cube", "uniform-cube"):
        pos = rng.uniform(-radius, radius, size=(n, 3))
    else:
        raise ValueError(f"init_point_cloud: unknown mode {mode!r}")
    feats = rng.normal(0.0, feature_std, size=(n, feature_dim))
    return PointCloud(pos.astype(dtype), feats.astype(dtype), np.zeros(n, dtype=dtype))


def prune_points(pc: PointCloud):
    """Drop points with strictly negative foreground score. Returns (cloud, removed indices)."""
    removed = np.flatnonzero(pc.scores < 0)
    if removed.size == len(pc):
        raise SceneEmptiedError("pruning would remove every point (scene emptied)")
    if removed.size == 0:
        return pc.copy(), removed
    return pc.subset(pc.scores >= 0), removed


def knn(points, k):
    """Indices and distances of each point's ``k`` nearest other points."""
    d2 = _kernels.pairwise_sqdist(points, points)
    np.fill_diagonal(d2, np.inf)
    idx, sq = _kernels.topk_rows(d2, k)
    return idx, np.sqrt(sq)


def neighbour_spread(points, k=10):
    """Standard deviation of the distances to the ``k`` nearest neighbours, per point."""
    _, dist = knn(points, k)
    return dist.std(axis=1)


@dataclass
class GrowthRecord:
    sources: np.ndarray  # (n_new, 4) point indices: seed point then its 3 nearest neighbours
    weights: np.ndarray  # (n_new, 4) convex weights


def grow_points(pc: PointCloud, n_new, seed=0, return_record=False):
    """Insert ``n_new`` points next to the points whose 10-NN distances vary the most.

    Each new point (and its feature) is a random convex combination of a
    source point and its three nearest neighbours; its score starts at zero.
    """
    n = len(pc)
    if n < 11:
        raise ValueError(f"grow_points: need at least 11 points, got {n}")
    if n_new < 1:
        record = GrowthRecord(np.zeros((0, 4), np.int64), np.zeros((0, 4)))
        return (pc.copy(), record) if return_record else pc.copy()
    rng = np.random.default_rng(seed)
    nn_idx, nn_dist = knn(pc.positions, 10)
    spread = nn_dist.std(axis=1)
    # stable descending order: larger spread first, lower index on ties
    chosen = np.argsort(-spread, kind="stable")[:n_new]
    if chosen.size < n_new:
        chosen = np.resize(chosen, n_new)
    sources = np.concatenate([chosen[:, None], nn_idx[chosen, :3]], axis=1)
    weights = rng.dirichlet(np.ones(4), size=n_new)
    new_pos = np.einsum("nk,nkc->nc", weights, pc.positions[sources])
    new_feat = np.einsum("nk,nkc->nc", weights, pc.features[sources])
    dtype = pc.positions.dtype
    grown = PointCloud(
        np.concatenate([pc.positions, new_pos.astype(dtype)]),
        np.concatenate([pc.features, new_feat.astype(pc.features.dtype)]),
        np.concatenate([pc.scores, np.zeros(n_new, dtype=pc.scores.dtype)]),
    )
    if return_record:
        return grown, GrowthRecord(sources, weights)
    return grown


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------


@dataclass
class Selection:
    """Either an explicit index list or an axis-aligned box ``lo <= p <= hi``."""

    indices: Optional[np.ndarray] = None
    box: Optional[tuple] = None

    def resolve(self, pc: PointCloud, where="selection"):
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
            bad = idx[(idx < 0) | (idx >= len(pc))]
            if bad.size:
                raise IndexError(f"{where}: index {int(bad[0])} out of range for {len(pc)} points")
            return idx
        lo, hi = (np.asarray(v, dtype=np.float64) for v in self.box)
        inside = np.all((pc.positions >= lo) & (pc.positions <= hi), axis=1)
        return np.flatnonzero(inside)

    def to_text(self):
        if self.indices is not None:
            return "indices:" + ",".join(str(int(i)) for i in self.indices)
        lo, hi = self.box
        return "box:" + ",".join(repr(float(v)) for v in list(lo) + list(hi))

    @classmethod
    def parse(cls, text):
        kind, _, body = text.partition(":")
        values = [v for v in body.split(",") if v.strip()]
        if kind == "indices":
            return cls(indices=np.array([int(v) for v in values], dtype=np.int64))
        if kind == "box":
            if len(values) != 6:
                raise ValueError(f"box selection needs 6 numbers, got {len(values)}")
            nums = [float(v) for v in values]
            return cls(box=(tuple(nums[:3]), tuple(nums[3:])))
        raise ValueError(f"unknown selection kind {kind!r}")


@dataclass
class EditCommand:
    action: str  # transform | duplicate | delete | transfer
    selection: Optional[Selection] = None
    matrix: Optional[np.ndarray] = None  # (3, 4) affine
    source: Optional[Selection] = None
    target: Optional[Selection] = None
    components: int = 1


@dataclass
class EditScript:
    commands: list = field(default_factory=list)

    @classmethod
    def parse(cls, text):
        """One command per line as ``key=value`` tokens; ``#`` starts a comment.

        ``action=transform select=box:x0,y0,z0,x1,y1,z1 matrix=<12 numbers, row-major 3x4>``
        ``action=duplicate select=indices:0,1,2 matrix=...``
        ``action=delete select=...``
        ``action=transfer source=... target=... components=4``
        """
        commands = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = {}
            for tok in shlex.split(line):
                key, sep, value = tok.partition("=")
                if not sep:
                    raise ValueError(f"edit script line {lineno}: expected key=value, got {tok!r}")
                fields[key] = value
            action = fields.pop("action", None)
            if action not in ("transform", "duplicate", "delete", "transfer"):
                raise ValueError(f"edit script line {lineno}: unknown action {action!r}")
            cmd = EditCommand(action)
            try:
                if action == "transfer":
                    cmd.source = Selection.parse(fields.pop("source"))
                    cmd.target = Selection.parse(fields.pop("target"))
                    cmd.components = int(fields.pop("components", 1))
                else:
                    cmd.selection = Selection.parse(fields.pop("select"))
                    if action in ("transform", "duplicate"):
                        m = fields.pop("matrix", None)
                        cmd.matrix = identity_affine() if m is None else \
                            np.array([float(v) for v in m.split(",")], dtype=np.float64).reshape(3, 4)
            except KeyError as exc:
                raise ValueError(f"edit script line {lineno}: missing field {exc.args[0]!r}") from None
            if fields:
                raise ValueError(f"edit script line {lineno}: unknown fields {sorted(fields)}")
            commands.append(cmd)
        return cls(commands)

    def to_text(self):
        lines = []
        for cmd in self.commands:
            parts = [f"action={cmd.action}"]
            if cmd.action == "transfer":
                parts += [f"source={cmd.source.to_text()}", f"target={cmd.target.to_text()}",
                          f"components={cmd.components}"]
            else:
                parts.append(f"select={cmd.selection.to_text()}")
                if cmd.matrix is not None:
                    parts.append("matrix=" + ",".join(repr(float(v)) for v in cmd.matrix.reshape(-1)))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def identity_affine():
    return np.hstack([np.eye(3), np.zeros((3, 1))])


def translation(offset):
    m = identity_affine()
    m[:, 3] = offset
    return m


def rotation_z(angle, center=(0.0, 0.0, 0.0)):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.asarray(center, dtype=np.float64)
    return np.hstack([rot, (center - rot @ center)[:, None]])


def _affine(matrix, points):
    m = np.asarray(matrix, dtype=np.float64)
    return (points @ m[:, :3].T + m[:, 3]).astype(points.dtype)


def apply_edits(pc: PointCloud, script: EditScript):
    """Apply commands in order. Moves touch positions only; features and scores travel unchanged."""
    out = pc.copy()
    for num, cmd in enumerate(script.commands):
        where = f"edit command {num} ({cmd.action})"
        if cmd.action == "transfer":
            src = cmd.source.resolve(out, where)
            dst = cmd.target.resolve(out, where)
            out = transfer_texture(out, src, dst, cmd.components)
            continue
        sel = cmd.selection.resolve(out, where)
        if cmd.action == "transform":
            out.positions[sel] = _affine(cmd.matrix, out.positions[sel])
        elif cmd.action == "duplicate":
            out = PointCloud(
                np.concatenate([out.positions, _affine(cmd.matrix, out.positions[sel])]),
                np.concatenate([out.features, out.features[sel]]),
                np.concatenate([out.scores, out.scores[sel]]),
            )
        elif cmd.action == "delete":
            keep = np.ones(len(out), dtype=bool)
            keep[sel] = False
            if not keep.any():
                raise SceneEmptiedError(f"{where}: deleting every point (scene emptied)")
            out = out.subset(keep)
        else:
            raise ValueError(f"{where}: unknown action")
    return out


# ---------------------------------------------------------------------------
# texture transfer and clustering
# ---------------------------------------------------------------------------


def principal_axes(x, n_components):
    """Mean, (dim, n) principal axes by descending variance, and their variances.

    Each axis is signed so its largest-magnitude entry is positive.
    """
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:n_components]
    axes = evecs[:, order]
    pivot = np.abs(axes).argmax(axis=0)
    signs = np.sign(axes[pivot, np.arange(axes.shape[1])])
    signs[signs == 0] = 1.0
    return mean, axes * signs, np.clip(evals[order], 0.0, None)


def transfer_texture(pc: PointCloud, source, target, n_components, rank_tol=1e-12):
    """Re-express target features in the source's principal subspace.

    Target coordinates along the target axes are mapped back through the
    source axes around the source mean. Source axes with (numerically) zero
    variance are dropped, so a constant source maps every target to it.
    """
    source = np.asarray(source, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    dim = pc.feature_dim
    if n_components > dim:
        raise ValueError(f"transfer_texture: {n_components} components exceed feature dim {dim}")
    if n_components < 1 or len(source) < n_components or len(target) < n_components:
        raise ValueError(
            f"transfer_texture: need |source|, |target| >= n_components >= 1 "
            f"(got {len(source)}, {len(target)}, {n_components})")
    src = pc.features[source].astype(np.float64)
    dst = pc.features[target].astype(np.float64)
    src_mean, src_axes, src_var = principal_axes(src, n_components)
    dst_mean, dst_axes, _ = principal_axes(dst, n_components)
    live = src_var > rank_tol * max(1.0, float(src_var.sum()))
    coords = (dst - dst_mean) @ dst_axes
    mapped = src_mean + (coords * live) @ src_axes.T
    out = pc.copy()
    out.features[target] = mapped.astype(pc.features.dtype)
    return out


@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list

    @property
    def inertia(self):
        return self.inertia_history[-1]


def cluster_features(features, k, seed=0, max_iter=50, tol=1e-8):
    """Lloyd's k-means from ``k`` distinct seeded random points."""
    features = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise ValueError(f"cluster_features: k must be >= 1, got {k}")
    if len(features) < k:
        raise ValueError(f"cluster_features: need at least k={k} points, got {len(features)}")
    rng = np.random.default_rng(seed)
    centroids = features[rng.choice(len(features), size=k, replace=False)].copy()
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _kernels.pairwise_sqdist(features, centroids)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(features)), labels].sum()))
        moved = 0.0
        for c in range(k):
            members = features[labels == c]
            if len(members):
                new = members.mean(axis=0)
                moved = max(moved, float(np.abs(new - centroids[c]).max()))
                centroids[c] = new
        if moved < tol:
            break
    d2 = _kernels.pairwise_sqdist(features, centroids)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(features)), labels].sum()))
    return Clustering(labels, centroids, history)


def chamfer_distance(a, b):
    """Symmetric Chamfer: mean squared nearest distance a->b plus b->a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance: both point sets must be non-empty")
    return float(_kernels.nearest_sqdist(a, b).mean() + _kernels.nearest_sqdist(b, a).mean())
