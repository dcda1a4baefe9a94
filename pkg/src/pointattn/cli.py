"""Command-line entry point: ``pointattn <command> [options]``.

Training options come from three layers, later ones winning: built-in
defaults, a ``key=value`` config file (``--config``), then ``--set key=value``
flags and the dedicated shortcuts (``--iters``, ``--seed``).
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import Checkpoint, load_checkpoint, load_dataset, save_checkpoint
from .geometry import Camera, look_at
from .metrics import psnr, ssim
from .model import render
from .pointscene import (
    EditScript,
    SceneEmptiedError,
    Selection,
    apply_edits,
    cluster_features,
    transfer_texture,
)
from .training import (
    CimleConfig,
    SplatBaselineConfig,
    TrainConfig,
    cimle_finetune,
    gradient_flow_experiment,
    train,
    write_gradflow_csv,
)

CHECKPOINT_NAME = "model.papr"


class CliError(Exception):
    pass


def read_config_file(path):
    """``key = value`` per line; blank lines and ``#`` comments ignored."""
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_train_config(args):
    cfg = TrainConfig()
    try:
        if args.config:
            cfg = cfg.updated(read_config_file(args.config))
        flags = _pairs(args.set)
        if args.iters is not None:
            flags["iterations"] = args.iters
        if args.seed is not None:
            flags["seed"] = args.seed
        return cfg.updated(flags)
    except KeyError as exc:
        raise CliError(str(exc).strip("'\"")) from None


def _floats(text, n=None, what="value"):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise CliError(f"could not parse {what} {text!r} as comma-separated numbers") from None
    if n is not None and len(vals) != n:
        raise CliError(f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _checkpoint_path(path):
    p = Path(path)
    return p / CHECKPOINT_NAME if p.is_dir() else p


def _save_model(ck, out):
    out = Path(out)
    target = out / CHECKPOINT_NAME if out.suffix != ".papr" else out
    save_checkpoint(ck, target)
    return target


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    exposures = _floats(args.exposures, what="--exposures") if args.exposures else None
    ds = dataio.generate_dataset(args.scene, args.views, args.res, seed=args.seed,
                                 background=_floats(args.background, 3, "--background"), exposures=exposures)
    dataio.save_dataset(ds, _out_dir(args.out))
    print(f"wrote {len(ds)} views at {args.res}x{args.res} to {args.out}")


def cmd_train(args):
    cfg = resolve_train_config(args)
    ds = load_dataset(args.data)
    rng = np.random.default_rng(cfg.seed)
    res = train(ds, cfg, rng=rng)
    out = _out_dir(args.out)
    path = _save_model(Checkpoint(res.model, cfg.to_dict(), res.adam, dataio.rng_state(res.rng)), out)
    res.write_log(out / "metrics.csv")
    (out / "config.txt").write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.to_dict().items()))
    final = res.log[-1] if res.log else None
    summary = f"; final loss {final.loss:.5f}, psnr {final.psnr:.2f}" if final else ""
    print(f"trained {cfg.iterations} iterations, {len(res.model.cloud)} points -> {path}{summary}")


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def _camera(args, ds=None):
    if args.eye:
        if ds is None and args.res is None:
            raise CliError("--eye needs --res or --data to fix the resolution")
        res = args.res or ds.resolution[0]
        fov = args.fov if args.fov is not None else (ds.cameras[0].fov_x if ds is not None else 0.7)
        return Camera(look_at(_floats(args.eye, 3, "--eye")), fov, res, res)
    if ds is None:
        raise CliError("give --data with --view, or --eye")
    if not 0 <= args.view < len(ds):
        raise CliError(f"--view {args.view} out of range (dataset has {len(ds)} views)")
    return ds.cameras[args.view]


def cmd_render(args):
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    ds = load_dataset(args.data) if args.data else None
    cam = _camera(args, ds)
    background = ds.background if ds is not None else _floats(args.background, 3, "--background")
    latent = None
    if args.latent_seed is not None:
        if ck.model.modulator is None:
            raise CliError("--latent-seed needs a checkpoint finetuned with `cimle`")
        from .renderer import LATENT_DIM
        latent = np.random.default_rng(args.latent_seed).normal(size=LATENT_DIM)
    out = render(ck.model, cam, background, latent=latent)
    d = _out_dir(args.out)
    dataio.save_image(d / "rgb.png", out.image.data)
    depth = out.depth_map()
    hi = depth.max()
    dataio.save_image(d / "depth.png", depth / hi if hi > 0 else depth)
    np.save(d / "depth.npy", depth)
    dataio.save_image(d / "mask.png", out.background.data)
    print(f"rendered {cam.height}x{cam.width} view to {d}")


def _image_files(path):
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise CliError(f"no PNG images in {path}")
    return files


def cmd_eval(args):
    rows = []
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise CliError("--pred and --gt go together")
        preds, gts = _image_files(args.pred), _image_files(args.gt)
        if [p.name for p in preds] != [g.name for g in gts]:
            raise CliError("--pred and --gt hold different file names")
        for p, g in zip(preds, gts):
            a, b = dataio.load_image(p), dataio.load_image(g)
            rows.append((p.name, psnr(a, b), ssim(a, b)))
    else:
        if not (args.checkpoint and args.data):
            raise CliError("give --pred/--gt directories or --checkpoint with --data")
        ck = load_checkpoint(_checkpoint_path(args.checkpoint))
        ds = load_dataset(args.data)
        for i, (cam, gt) in enumerate(zip(ds.cameras, ds.images)):
            img = np.clip(render(ck.model, cam, ds.background).image.data, 0, 1)
            rows.append((f"view_{i:03d}", psnr(img, gt), ssim(img, gt)))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, f"{p:.4f}", f"{s:.5f}"])
        w.writerow(["mean", f"{mean_p:.4f}", f"{mean_s:.5f}"])
    print(f"{len(rows)} views: mean PSNR {mean_p:.2f} dB, mean SSIM {mean_s:.4f} -> {out}")


def cmd_edit(args):
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    script = EditScript.parse(Path(args.script).read_text())
    cloud = apply_edits(ck.model.cloud, script)
    # optimizer moments are per point and no longer line up after an edit
    path = _save_model(Checkpoint(ck.model.with_cloud(cloud), ck.config, None, ck.rng_state), args.out)
    print(f"applied {len(script.commands)} edits: {len(ck.model.cloud)} -> {len(cloud)} points -> {path}")


def cmd_cluster(args):
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    res = cluster_features(ck.model.cloud.features, args.k, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.export_ply(ck.model.cloud.positions, out, res.labels)
    sizes = np.bincount(res.labels, minlength=args.k)
    print(f"{args.k} clusters (sizes {', '.join(map(str, sizes))}), inertia {res.inertia:.4g} -> {out}")


def cmd_transfer(args):
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    cloud = ck.model.cloud
    src = Selection.parse(args.source).resolve(cloud)
    dst = Selection.parse(args.target).resolve(cloud)
    new = transfer_texture(cloud, src, dst, args.components)
    path = _save_model(Checkpoint(ck.model.with_cloud(new), ck.config, None, ck.rng_state), args.out)
    print(f"transferred texture from {len(src)} to {len(dst)} points -> {path}")


def cmd_cimle(args):
    ck = load_checkpoint(_checkpoint_path(args.checkpoint))
    ds = load_dataset(args.data)
    cfg = CimleConfig(samples=args.samples, outer=args.outer, inner=args.inner, lr=args.lr,
                      batch=args.batch, seed=args.seed, train_renderer=args.train_renderer)
    model = cimle_finetune(ds, ck.model, cfg)
    path = _save_model(Checkpoint(model, ck.config, None, ck.rng_state), args.out)
    print(f"finetuned latent modulator ({cfg.outer} outer x {cfg.inner} inner steps) -> {path}")


def cmd_gradflow(args):
    distances = _floats(args.distances, what="--distances")
    rows = gradient_flow_experiment(distances, SplatBaselineConfig(args.sigma, args.radius), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gradflow_csv(rows, out)
    print(f"{len(rows)} distances -> {out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pointattn", description="Point-based proximity-attention renderer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="ray-trace a synthetic multi-view dataset")
    g.add_argument("--scene", default="cube", choices=sorted(dataio.SCENES))
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--background", default="1,1,1")
    g.add_argument("--exposures", help="comma-separated exposure levels; every view is rendered at each")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a point model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render RGB, depth and background-mask PNGs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", help="dataset supplying the camera (--view) and background")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--eye", help="camera position x,y,z looking at the origin (overrides --view)")
    r.add_argument("--res", type=int)
    r.add_argument("--fov", type=float)
    r.add_argument("--background", default="1,1,1")
    r.add_argument("--latent-seed", type=int, help="seed of the latent code for a finetuned modulator")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM table as CSV")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("edit", help="apply an edit script to a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--script", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_edit)

    c = sub.add_parser("cluster", help="k-means on point features, written as a coloured PLY")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--k", type=int, default=6)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    x = sub.add_parser("transfer", help="move feature texture between point selections")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--source", required=True, help="selection, e.g. indices:0,1,2 or box:x0,y0,z0,x1,y1,z1")
    x.add_argument("--target", required=True)
    x.add_argument("--components", type=int, default=4)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_transfer)

    m = sub.add_parser("cimle", help="finetune a latent modulator for exposure variation")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--samples", type=int, default=8)
    m.add_argument("--outer", type=int, default=10)
    m.add_argument("--inner", type=int, default=50)
    m.add_argument("--lr", type=float, default=5e-4)
    m.add_argument("--batch", type=int, default=0)
    m.add_argument("--train-renderer", action="store_true")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_cimle)

    f = sub.add_parser("gradflow", help="splat vs attention position-gradient sweep as CSV")
    f.add_argument("--distances", default="0,1,2,3,4,5,6,7,8,9,10", help="pixel distances")
    f.add_argument("--sigma", type=float, default=1.0)
    f.add_argument("--radius", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_gradflow)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, IndexError, OSError, FloatingPointError, SceneEmptiedError) as exc:
        msg = str(exc).strip("'\"") or type(exc).__name__
        print(f"pointattn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
