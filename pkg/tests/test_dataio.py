import json
import warnings

import numpy as np
import pytest

from pointattn.dataio import (
    Checkpoint,
    CheckpointError,
    checkpoint_bytes,
    export_ply,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    parse_checkpoint,
    ray_sphere,
    read_ply,
    rng_from_state,
    rng_state,
    save_checkpoint,
    save_dataset,
)
from pointattn.geometry import generate_rays
from pointattn.model import init_model
from pointattn.training import AdamState, adam_step


@pytest.fixture(scope="module")
def cube():
    return generate_dataset("cube", n_views=3, resolution=8, seed=0)


def test_generated_dataset_shapes_and_poses():
    ds = generate_dataset("sphere", n_views=8, resolution=64, seed=1)
    assert len(ds) == 8 and len(ds.cameras) == 8
    assert all(img.shape == (64, 64, 3) for img in ds.images)
    for cam in ds.cameras:
        assert abs(np.linalg.norm(cam.center) - 4.0) < 1e-12
    assert ds.surface_points.shape == (4096, 3)
    assert np.abs(np.linalg.norm(ds.surface_points, axis=1) - 0.6).max() < 1e-12


def test_sphere_background_pixels_exact():
    ds = generate_dataset("sphere", n_views=2, resolution=32, seed=2, background=(0.1, 0.2, 0.3))
    for cam, img in zip(ds.cameras, ds.images):
        rays = generate_rays(cam)
        miss = ~np.isfinite(ray_sphere(rays.origins, rays.dirs, np.zeros(3), 0.6))
        assert miss.any()
        assert np.all(img.reshape(-1, 3)[miss] == [0.1, 0.2, 0.3])


def test_ray_sphere_matches_closed_form():
    rng = np.random.default_rng(3)
    o = rng.normal(size=(500, 3)) * 3
    d = -o + rng.normal(scale=0.3, size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t = ray_sphere(o, d, np.zeros(3), 1.0)
    for oi, di, ti in zip(o, d, t):
        b, c = 2 * oi @ di, oi @ oi - 1.0
        disc = b * b - 4 * c
        if disc < 0 or np.linalg.norm(oi) < 1:
            continue
        assert abs(ti - (-b - np.sqrt(disc)) / 2) < 1e-9


def test_generate_dataset_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_dataset("teapot")
    with pytest.raises(ValueError):
        generate_dataset("cube", resolution=10)


def test_dataset_round_trip(cube, tmp_path):
    save_dataset(cube, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == len(cube)
    for a, b in zip(cube.images, back.images):
        assert np.abs(a - b).max() <= 1 / 255
    for a, b in zip(cube.cameras, back.cameras):
        np.testing.assert_array_equal(a.c2w, b.c2w)
        assert a.fov_x == b.fov_x
    np.testing.assert_array_equal(back.surface_points, cube.surface_points)


def test_exposures_round_trip(tmp_path):
    ds = generate_dataset("cube", n_views=2, resolution=8, exposures=[0.5, 1.0])
    assert len(ds) == 4 and ds.exposures == [0.5, 0.5, 1.0, 1.0]
    save_dataset(ds, tmp_path)
    assert load_dataset(tmp_path).exposures == [0.5, 0.5, 1.0, 1.0]


def test_missing_image_named(cube, tmp_path):
    save_dataset(cube, tmp_path)
    (tmp_path / "images" / "r_001.png").unlink()
    with pytest.raises(FileNotFoundError, match="r_001.png"):
        load_dataset(tmp_path)


def test_missing_field_named(cube, tmp_path):
    save_dataset(cube, tmp_path)
    meta = json.loads((tmp_path / "transforms.json").read_text())
    del meta["frames"][0]["transform_matrix"]
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="transform_matrix"):
        load_dataset(tmp_path)


def test_non_orthonormal_rotation_warns(cube, tmp_path):
    save_dataset(cube, tmp_path)
    meta = json.loads((tmp_path / "transforms.json").read_text())
    m = np.array(meta["frames"][1]["transform_matrix"])
    m[:3, 0] *= 1.01
    meta["frames"][1]["transform_matrix"] = m.tolist()
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.warns(UserWarning, match="orthonormal"):
        ds = load_dataset(tmp_path)
    assert len(ds) == 3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        save_dataset(cube, tmp_path / "clean")
        load_dataset(tmp_path / "clean")


def _checkpoint(with_adam=True):
    model = init_model(16, k=4, renderer="tiny", seed=4, dtype=np.float32, with_modulator=True)
    adam = None
    if with_adam:
        adam = AdamState()
        arrays = model.arrays()
        adam_step(arrays, {n: np.ones_like(a) for n, a in arrays.items()}, adam, 1e-3)
    rng = np.random.default_rng(5)
    rng.normal(size=3)
    return Checkpoint(model, {"k": 4, "seed": 4}, adam, rng_state(rng))


def test_checkpoint_byte_round_trip(tmp_path):
    ck = _checkpoint()
    path = tmp_path / "a.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == path.read_bytes()
    for name, arr in ck.model.arrays().items():
        np.testing.assert_array_equal(back.model.arrays()[name], arr)
    assert back.adam.t == 1 and back.config == {"k": 4, "seed": 4}
    r1, r2 = rng_from_state(ck.rng_state), rng_from_state(back.rng_state)
    assert r1.normal() == r2.normal()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_optimizer_state():
    ck = _checkpoint(with_adam=False)
    back = parse_checkpoint(checkpoint_bytes(ck))
    assert back.adam is None


def test_checkpoint_corruption_errors():
    data = checkpoint_bytes(_checkpoint())
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint(data[:-7])
    with pytest.raises(CheckpointError, match="expected 1, found 9"):
        parse_checkpoint(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(data + b"\0")


def test_ply_round_trip(tmp_path):
    pos = np.random.default_rng(6).normal(size=(20, 3))
    labels = np.arange(20) % 6
    export_ply(pos, tmp_path / "c.ply", labels)
    back, colours = read_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(back, pos, rtol=1e-8)
    assert colours.shape == (20, 3) and len({tuple(c) for c in colours}) == 6
    export_ply(pos, tmp_path / "p.ply")
    assert read_ply(tmp_path / "p.ply")[1] is None
