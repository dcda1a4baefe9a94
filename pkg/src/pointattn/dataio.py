"""Synthetic scenes, the transforms.json dataset layout, checkpoints and PLY export.

Checkpoint file layout (all integers little-endian)::

    b"PAPR"  u32 version  u32 record_count
    record := u16 name_len, name (utf-8), u8 kind, payload
      kind 0 (array): u8 ndim, ndim x u32 extents, float32 values (C order)
      kind 1 (text):  u32 byte_len, utf-8 bytes

Records appear in this order: ``meta.config``, ``meta.model``, ``meta.rng``,
``meta.adam`` (text), then point arrays (positions, features, scores), network
arrays, modulator arrays (each group by sorted name), then ``adam.m.*`` and
``adam.v.*`` in the same name order.
"""

import io
import json
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .attention import AttentionConfig
from .geometry import Camera, generate_rays, look_at
from .model import Model
from .pointscene import PointCloud

MAGIC = b"PAPR"
VERSION = 1


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: list  # (H, W, 3) float arrays in [0, 1]
    cameras: list
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    surface_points: Optional[np.ndarray] = None
    exposures: Optional[list] = None

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError(f"dataset: {len(self.images)} images but {len(self.cameras)} cameras")
        self.background = np.asarray(self.background, dtype=np.float64)
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise ValueError(f"dataset: images disagree in resolution: {sorted(shapes)}")

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images[0].shape[:2]

    def subset(self, indices):
        idx = list(indices)
        return Dataset([self.images[i] for i in idx], [self.cameras[i] for i in idx], self.background,
                       self.surface_points,
                       None if self.exposures is None else [self.exposures[i] for i in idx])


@dataclass
class Primitive:
    kind: str  # sphere | box
    center: np.ndarray
    size: float  # radius or half-extent
    colours: tuple  # two albedos for the checkerboard
    checks: int = 4


SCENES = {
    "cube": [Primitive("box", np.zeros(3), 0.5, ((0.85, 0.25, 0.2), (0.2, 0.35, 0.85)), checks=2)],
    "sphere": [Primitive("sphere", np.zeros(3), 0.6, ((0.9, 0.7, 0.15), (0.15, 0.6, 0.3)))],
    "two-object": [
        Primitive("sphere", np.array([-0.5, 0.0, 0.0]), 0.35, ((0.85, 0.2, 0.2), (0.85, 0.2, 0.2))),
        Primitive("box", np.array([0.5, 0.0, 0.0]), 0.3, ((0.2, 0.3, 0.85), (0.9, 0.8, 0.2))),
    ],
}

LIGHT_DIR = np.array([0.4, -0.5, 0.75]) / np.linalg.norm([0.4, -0.5, 0.75])
AMBIENT = 0.35


def ray_sphere(origins, dirs, center, radius):
    """Nearest positive hit distance per ray (inf for misses); dirs unit length."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius ** 2
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where(hit & (t > 1e-9), t, np.inf)


def ray_box(origins, dirs, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        lo = (center - half - origins) * inv
        hi = (center + half - origins) * inv
    tmin = np.nanmax(np.minimum(lo, hi), axis=1)
    tmax = np.nanmin(np.maximum(lo, hi), axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def _shade(prim, points):
    local = points - prim.center
    if prim.kind == "sphere":
        normals = local / np.linalg.norm(local, axis=1, keepdims=True)
        u = np.arctan2(normals[:, 1], normals[:, 0]) / np.pi
        v = np.arccos(np.clip(normals[:, 2], -1, 1)) / np.pi
        check = (np.floor(u * prim.checks) + np.floor(v * prim.checks)) % 2
    else:
        axis = np.abs(local).argmax(axis=1)
        normals = np.zeros_like(local)
        normals[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
        scaled = (local / prim.size + 1.0) * 0.5 * prim.checks
        check = np.floor(scaled).sum(axis=1) % 2
    albedo = np.where(check[:, None] > 0, np.asarray(prim.colours[1]), np.asarray(prim.colours[0]))
    diffuse = np.clip(normals @ LIGHT_DIR, 0.0, None)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * diffuse[:, None])


def trace(primitives, origins, dirs, background, exposure=1.0):
    """Analytic render of Lambertian primitives; returns (colours (R, 3), depth (R,))."""
    best = np.full(len(origins), np.inf)
    which = np.full(len(origins), -1)
    for i, prim in enumerate(primitives):
        t = ray_sphere(origins, dirs, prim.center, prim.size) if prim.kind == "sphere" \
            else ray_box(origins, dirs, prim.center, prim.size)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = i
    colours = np.broadcast_to(np.asarray(background, dtype=np.float64), origins.shape).copy()
    for i, prim in enumerate(primitives):
        mask = which == i
        if mask.any():
            pts = origins[mask] + best[mask, None] * dirs[mask]
            colours[mask] = np.clip(exposure * _shade(prim, pts), 0.0, 1.0)
    return colours, best


def sample_surface(primitives, n, rng):
    """Area-uniform samples on the union of primitive surfaces."""
    areas = np.array([4 * np.pi * p.size ** 2 if p.kind == "sphere" else 24 * p.size ** 2 for p in primitives])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for prim, c in zip(primitives, counts):
        if prim.kind == "sphere":
            v = rng.normal(size=(c, 3))
            pts = prim.size * v / np.linalg.norm(v, axis=1, keepdims=True)
        else:
            pts = rng.uniform(-prim.size, prim.size, size=(c, 3))
            axis = rng.integers(3, size=c)
            pts[np.arange(c), axis] = prim.size * rng.choice([-1.0, 1.0], size=c)
        out.append(pts + prim.center)
    return np.concatenate(out)


def orbit_cameras(n_views, radius, fov, resolution, seed):
    """Cameras on a sphere looking at the origin (Fibonacci layout, seeded azimuth offset)."""
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0, 2 * np.pi)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n_views):
        z = 1.0 - 2.0 * (i + 0.5) / n_views
        r = np.sqrt(1.0 - z * z)
        phi = offset + golden * i
        eye = radius * np.array([r * np.cos(phi), r * np.sin(phi), z])
        cams.append(Camera(look_at(eye), fov, resolution, resolution))
    return cams


def generate_dataset(scene="cube", n_views=16, resolution=64, seed=0, radius=4.0, fov=0.7,
                     background=(1.0, 1.0, 1.0), exposures=None, n_surface=4096):
    """Ray-traced multi-view images of a named synthetic scene.

    ``exposures`` (optional list) renders every camera once per exposure level.
    """
    if scene not in SCENES:
        raise ValueError(f"generate_dataset: unknown scene {scene!r} (choose from {sorted(SCENES)})")
    if n_views < 1:
        raise ValueError("generate_dataset: need at least one view")
    if resolution % 4:
        raise ValueError(f"generate_dataset: resolution {resolution} must be a multiple of 4")
    prims = SCENES[scene]
    rng = np.random.default_rng(seed)
    cams = orbit_cameras(n_views, radius, fov, resolution, seed)
    levels = [1.0] if exposures is None else list(exposures)
    images, cameras, exps = [], [], []
    for level in levels:
        for cam in cams:
            rays = generate_rays(cam)
            colours, _ = trace(prims, rays.origins, rays.dirs, background, level)
            images.append(colours.reshape(resolution, resolution, 3))
            cameras.append(cam)
            exps.append(level)
    return Dataset(images, cameras, np.asarray(background, dtype=np.float64),
                   sample_surface(prims, n_surface, rng), exps if exposures is not None else None)


def save_image(path, img):
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_dataset(ds: Dataset, path):
    """``transforms.json`` + ``images/r_###.png`` (+ ``surface_points.npy``)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, cam) in enumerate(zip(ds.images, ds.cameras)):
        rel = f"images/r_{i:03d}.png"
        save_image(root / rel, img)
        frame = {"file_path": rel, "transform_matrix": cam.c2w.tolist()}
        if ds.exposures is not None:
            frame["exposure"] = float(ds.exposures[i])
        frames.append(frame)
    meta = {
        "camera_angle_x": float(ds.cameras[0].fov_x),
        "background": [float(v) for v in ds.background],
        "frames": frames,
    }
    (root / "transforms.json").write_text(json.dumps(meta, indent=2))
    if ds.surface_points is not None:
        np.save(root / "surface_points.npy", ds.surface_points)


def _require(mapping, key, where):
    if key not in mapping:
        raise ValueError(f"{where}: missing field {key!r}")
    return mapping[key]


def load_dataset(path, orthonormal_tol=1e-3):
    root = Path(path)
    meta_path = root / "transforms.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"load_dataset: {meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"load_dataset: transforms.json is not valid JSON ({exc})") from None
    fov = float(_require(meta, "camera_angle_x", "transforms.json"))
    frames = _require(meta, "frames", "transforms.json")
    if not isinstance(frames, list) or not frames:
        raise ValueError("transforms.json: field 'frames' must be a non-empty list")
    images, cameras, exposures = [], [], []
    for i, frame in enumerate(frames):
        where = f"transforms.json frame {i}"
        rel = str(_require(frame, "file_path", where))
        matrix = np.asarray(_require(frame, "transform_matrix", where), dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError(f"{where}: field 'transform_matrix' must be 4x4, got {matrix.shape}")
        img_path = root / rel
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise FileNotFoundError(f"load_dataset: missing image file {img_path}")
        img = load_image(img_path)
        cam = Camera(matrix, fov, img.shape[0], img.shape[1])
        err = cam.orthonormality_error()
        if err > orthonormal_tol:
            warnings.warn(f"{where}: rotation is not orthonormal (error {err:.2e})", stacklevel=2)
        images.append(img)
        cameras.append(cam)
        exposures.append(frame.get("exposure"))
    surface = root / "surface_points.npy"
    return Dataset(images, cameras, np.asarray(meta.get("background", [1.0, 1.0, 1.0]), dtype=np.float64),
                   np.load(surface) if surface.exists() else None,
                   exposures if any(e is not None for e in exposures) else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    config: dict = field(default_factory=dict)  # TrainConfig echo
    adam: Optional[object] = None  # training.AdamState
    rng_state: Optional[dict] = None


def _model_meta(model: Model):
    return {"k": model.k, "attention": asdict(model.attention)}


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _records(ck: Checkpoint):
    model = ck.model
    texts = [
        ("meta.config", _dumps(ck.config)),
        ("meta.model", _dumps(_model_meta(model))),
        ("meta.rng", _dumps(ck.rng_state)),
        ("meta.adam", _dumps(None if ck.adam is None else
                             {"t": ck.adam.t, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "eps": ck.adam.eps})),
    ]
    arrays = [("points.positions", model.cloud.positions), ("points.features", model.cloud.features),
              ("points.scores", model.cloud.scores)]
    names = sorted(model.params)
    arrays += [(n, model.params[n]) for n in names]
    mod_names = sorted(model.modulator) if model.modulator is not None else []
    arrays += [(n, model.modulator[n]) for n in mod_names]
    if ck.adam is not None:
        order = [a[0] for a in arrays]
        arrays += [(f"adam.m.{n}", ck.adam.m[n]) for n in order if n in ck.adam.m]
        arrays += [(f"adam.v.{n}", ck.adam.v[n]) for n in order if n in ck.adam.v]
    return texts, arrays


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    texts, arrays = _records(ck)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(texts) + len(arrays)))
    for name, text in texts:
        raw = name.encode()
        body = text.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BI", 1, len(body)) + body)
    for name, arr in arrays:
        raw = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 0, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def save_checkpoint(ck: Checkpoint, path):
    """Atomic write: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    from .training import AdamState

    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: expected {VERSION}, found {version}")
    texts, arrays = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (kind,) = r.unpack("<B")
        if kind == 1:
            (blen,) = r.unpack("<I")
            texts[name] = json.loads(r.take(blen).decode())
        elif kind == 0:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        else:
            raise CheckpointError(f"unknown record kind {kind} for {name!r}")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint records")
    for key in ("meta.config", "meta.model", "meta.rng", "meta.adam",
                "points.positions", "points.features", "points.scores"):
        if key not in texts and key not in arrays:
            raise CheckpointError(f"checkpoint missing record {key!r}")
    meta = texts["meta.model"]
    cloud = PointCloud(arrays.pop("points.positions"), arrays.pop("points.features"), arrays.pop("points.scores"))
    params = {n: a for n, a in arrays.items() if not n.startswith(("mod.", "adam."))}
    modulator = {n: a for n, a in arrays.items() if n.startswith("mod.")} or None
    model = Model(cloud, params, AttentionConfig(**meta["attention"]), int(meta["k"]), modulator)
    adam = None
    if texts["meta.adam"] is not None:
        a = texts["meta.adam"]
        adam = AdamState(
            m={n[len("adam.m."):]: v for n, v in arrays.items() if n.startswith("adam.m.")},
            v={n[len("adam.v."):]: v for n, v in arrays.items() if n.startswith("adam.v.")},
            t=int(a["t"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return Checkpoint(model, texts["meta.config"], adam, texts["meta.rng"])


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def rng_state(rng: np.random.Generator):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def rng_from_state(state):
    rng = np.random.default_rng()
    if state is not None:
        rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# point cloud export
# ---------------------------------------------------------------------------

PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


def cluster_colours(labels):
    labels = np.asarray(labels, dtype=np.int64)
    return PALETTE[labels % len(PALETTE)]


def export_ply(positions, path, labels=None):
    """ASCII PLY with x, y, z (and red, green, blue from cluster labels when given)."""
    positions = np.asarray(positions, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(positions)}",
             "property float x", "property float y", "property float z"]
    colours = None
    if labels is not None:
        colours = cluster_colours(labels)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(positions):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if colours is not None:
            row += " {} {} {}".format(*colours[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Minimal ASCII PLY vertex reader: returns (positions, colours or None)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    props = []
    end = None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        elif line.strip() == "end_header":
            end = i
            break
    if end is None:
        raise ValueError(f"{path}: missing end_header")
    rows = np.array([[float(v) for v in line.split()] for line in text[end + 1:end + 1 + n]]).reshape(n, len(props))
    pos = rows[:, [props.index(c) for c in ("x", "y", "z")]]
    colours = rows[:, [props.index(c) for c in ("red", "green", "blue")]].astype(np.uint8) \
        if "red" in props else None
    return pos, colours
