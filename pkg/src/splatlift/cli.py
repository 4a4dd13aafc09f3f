"""Command-line entry point: synth, fit, mask, train, lift, render, eval.

Any flag may also come from a ``key = value`` config file passed with
``--config``; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SCENE_KINDS, TrajectoryConfig, gen_scene, make_cameras, oracle_visibility, raycast_render
from .geometry import Camera, RigidTransform, look_at
from .io import (
    DatasetManifest,
    FormatError,
    ViewEntry,
    read_checkpoint,
    read_float_image,
    read_scene,
    save_png,
    write_checkpoint,
    write_float_image,
    write_ply,
    write_scene,
    write_stamp,
)
from .render import render

log = logging.getLogger("splatlift")

# flags that only name outputs or control logging; they never enter the config hash
NON_COMPUTATIONAL = {"out", "out_dir", "log", "ply", "config", "verbose", "func", "command", "table", "depth_out"}


def parse_config_file(path) -> dict[str, str]:
    out = {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing config file: {p}")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{p}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _stamp_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in NON_COMPUTATIONAL}


def _view_images(man: DatasetManifest, base: Path):
    return [(read_float_image(base / v.image), v.camera()) for v in man.views]


# subcommands


def cmd_synth(args) -> None:
    if args.views < 2:
        raise ValueError("need ≥ 2 views")
    if args.kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {args.kind!r}; choose from {', '.join(SCENE_KINDS)}")
    out = Path(args.out_dir)
    for sub in ("images", "depths", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    traj = TrajectoryConfig(count=args.views, step=args.step, width=args.resolution, height=args.resolution,
                            fov_deg=args.fov, pattern=args.pattern)
    cams = make_cameras(traj)
    scene = gen_scene(args.kind, args.seed, reference=cams[traj.reference])
    entries = []
    for i, cam in enumerate(cams):
        color, depth = raycast_render(scene, cam)
        write_float_image(out / f"images/{i:03d}.fimg", color)
        save_png(out / f"images/{i:03d}.png", color)
        write_float_image(out / f"depths/{i:03d}.fimg", depth)
        masks = {}
        for j, other in enumerate(cams):
            if j != i:
                rel = f"masks/{i:03d}_{j:03d}.fimg"
                write_float_image(out / rel, oracle_visibility(scene, cam, other))
                masks[str(j)] = rel
        entries.append(ViewEntry.from_camera(cam, f"images/{i:03d}.fimg", depth=f"depths/{i:03d}.fimg",
                                             preview=f"images/{i:03d}.png", masks=masks))
    man = DatasetManifest(f"{args.kind}-{args.seed}", entries, kind=args.kind, seed=args.seed,
                          reference=traj.reference, extent=scene.extent, bounds=[list(b) for b in scene.bounds])
    man.save(out)
    write_stamp(out, "synth", args.seed, _stamp_config(args))
    print(f"wrote {len(cams)} views and {len(cams) * (len(cams) - 1)} oracle masks to {out}")


def cmd_fit(args) -> None:
    from .scenefit import FitConfig, fit_scene

    base = Path(args.dataset)
    man = DatasetManifest.load(base)
    views = _view_images(man, base)
    if len(views) < 2:
        raise ValueError("need ≥ 2 views")
    cfg = FitConfig(iterations=args.iterations, init_point_count=args.init_points, init_mode=args.init_mode,
                    scene_extent=man.extent, init_bounds=None if man.bounds is None else tuple(tuple(b) for b in man.bounds))
    result = fit_scene(views, cfg, seed=args.seed)
    out = Path(args.out) if args.out else base / "scene.gscn"
    write_scene(out, result.scene)
    result.write_log(out.with_suffix(".csv"))
    if args.ply:
        write_ply(args.ply, result.scene)
    write_stamp(out.parent, "fit", args.seed, _stamp_config(args))
    print(f"fit {len(result.scene)} Gaussians, final loss {result.losses[-1]:.6f} -> {out}")


def cmd_mask(args) -> None:
    from .visibility import binarize, compute_pairwise_masks, iou

    base = Path(args.dataset)
    man = DatasetManifest.load(base)
    scene = read_scene(args.scene or base / "scene.gscn")
    cams = [v.camera() for v in man.views]
    masks = compute_pairwise_masks(scene, cams, normalized=args.normalized)
    out = base / "gmasks"
    out.mkdir(exist_ok=True)
    scores = []
    for (i, j), m in sorted(masks.items()):
        write_float_image(out / f"{i:03d}_{j:03d}.fimg", m.image)
        oracle_rel = man.views[i].masks.get(str(j))
        if oracle_rel:
            scores.append(iou(binarize(m), read_float_image(base / oracle_rel).data[:, :, 0] > 0.5))
    write_stamp(base, "mask", 0, _stamp_config(args))
    msg = f"wrote {len(masks)} masks to {out}"
    if scores:
        msg += f"; IoU vs oracle: mean {np.mean(scores):.4f}, min {np.min(scores):.4f}"
    print(msg)


def _samples_from_dataset(base: Path, mask_source: str, need_masks: bool):
    from .training import TrainSample
    from .visibility import VisibilityMask, depth_visibility_mask

    man = DatasetManifest.load(base)
    ref = man.reference
    cams = [v.camera() for v in man.views]
    imgs = [read_float_image(base / v.image) for v in man.views]
    samples = []
    for j, cam in enumerate(cams):
        mask = eval_mask = None
        if j != ref and man.views[ref].masks.get(str(j)):
            eval_mask = read_float_image(base / man.views[ref].masks[str(j)]).data[:, :, 0].astype(np.float64)
        if need_masks:
            if mask_source == "gaussian":
                p = base / "gmasks" / f"{ref:03d}_{j:03d}.fimg"
                if j == ref:
                    p = None
                if p is not None and not p.is_file():
                    raise FileNotFoundError(f"missing Gaussian-derived mask {p}; run 'splatlift mask' first")
                mask = VisibilityMask(read_float_image(p)) if p else None
            if mask is None:
                if man.views[ref].depth is None or man.views[j].depth is None:
                    raise FileNotFoundError(f"dataset {base} has no depth maps for oracle-depth masks")
                dr = read_float_image(base / man.views[ref].depth)
                dj = read_float_image(base / man.views[j].depth)
                mask = depth_visibility_mask(dr, dj, cams[ref], cams[j], provenance="oracle-depth")
        K = cam.pose.compose(cams[ref].pose.inverse())
        samples.append(TrainSample(imgs[ref], imgs[j], K, mask, cams[ref], cam, f"{man.scene_id}/{j}", eval_mask))
    return man, samples


def cmd_train(args) -> None:
    from .lifter import LifterConfig, LifterParams
    from .training import LossConfig, train_lifter

    samples, extent, res = [], None, None
    for d in args.dataset:
        man, s = _samples_from_dataset(Path(d), args.mask_source, args.mask)
        samples += s
        extent = man.extent if extent is None else extent
        r = (man.views[0].height, man.views[0].width)
        if res is not None and r != res:
            raise ValueError(f"resolution mismatch between datasets: {res} vs {r}")
        res = r
    cfg = LifterConfig(height=res[0], width=res[1], scene_extent=extent or 10.0)
    params = LifterParams.create(cfg, seed=args.seed)
    holdout = [s for s in samples if s.eval_mask is not None]
    result = train_lifter(samples, params, LossConfig(masking=args.mask), steps=args.steps, batch=args.batch,
                          lr_head=args.lr_head, lr_trunk=args.lr_trunk, seed=args.seed, holdout=holdout,
                          eval_every=args.eval_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out, params)
    result.write_log(args.log or out.with_suffix(".csv"))
    write_stamp(out.parent, "train", args.seed, _stamp_config(args))
    print(f"trained {args.steps} steps on {len(samples)} pairs, final loss {result.log[-1][1] if result.log else float('nan'):.6f} -> {out}")


def _intrinsics(args, width: int, height: int) -> Camera:
    if args.fx is not None:
        fy = args.fy if args.fy is not None else args.fx
        cx = args.cx if args.cx is not None else width / 2
        cy = args.cy if args.cy is not None else height / 2
        return Camera(args.fx, fy, cx, cy, width, height)
    return Camera.from_fov(width, height, args.fov)


def cmd_lift(args) -> None:
    from .lifter import lift

    params = read_checkpoint(args.checkpoint)
    img = read_float_image(args.image)
    if (img.height, img.width) != (params.cfg.height, params.cfg.width):
        raise ValueError(f"resolution mismatch: image {img.height}x{img.width}, "
                         f"checkpoint {params.cfg.height}x{params.cfg.width}")
    cam = _intrinsics(args, img.width, img.height)
    scene = lift(img, params, cam, Path(args.image).stem)
    write_scene(args.out, scene)
    if args.ply:
        write_ply(args.ply, scene)
    write_stamp(Path(args.out).parent, "lift", 0, _stamp_config(args))
    print(f"lifted {len(scene)} Gaussians -> {args.out}")


def cmd_render(args) -> None:
    from .render import render_depth

    scene = read_scene(args.scene)
    cam = _intrinsics(args, args.width, args.height)
    if args.world_to_camera:
        vals = [float(v) for v in args.world_to_camera.replace(",", " ").split()]
        if len(vals) != 16:
            raise ValueError("--world-to-camera takes 16 numbers (row-major 4x4)")
        pose = RigidTransform.from_matrix(np.array(vals).reshape(4, 4))
    elif args.eye:
        pose = look_at([float(v) for v in args.eye.split(",")], [float(v) for v in args.target.split(",")])
    else:
        pose = RigidTransform()
    cam = cam.with_pose(pose)
    out = render(scene, cam)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_float_image(prefix.with_suffix(".fimg"), out.color)
    save_png(prefix.with_suffix(".png"), out.color)
    if args.depth_out:
        write_float_image(args.depth_out, render_depth(scene, cam))
    print(f"rendered {args.width}x{args.height} -> {prefix.with_suffix('.png')}")


def cmd_eval(args) -> None:
    from .evaluation import evaluate

    params = read_checkpoint(args.checkpoint)
    offsets = [int(o) for o in args.offsets.split(",") if o.strip()]
    buckets: dict[str, list] = {"input": [], **{f"+{o}": [] for o in offsets}, "uniform": []}
    for d in args.dataset:
        man, samples = _samples_from_dataset(Path(d), "oracle-depth", False)
        if (man.views[0].height, man.views[0].width) != (params.cfg.height, params.cfg.width):
            raise ValueError(f"resolution mismatch: data {man.views[0].height}x{man.views[0].width}, "
                             f"checkpoint {params.cfg.height}x{params.cfg.width}")
        for j, s in enumerate(samples):
            off = abs(j - man.reference)
            if off == 0:
                s.eval_mask = read_float_image(Path(d) / man.views[j].depth).data[:, :, 1].astype(np.float64) \
                    if man.views[j].depth else None
                buckets["input"].append(s)
                continue
            if off in offsets:
                buckets[f"+{off}"].append(s)
            if off <= args.window:
                buckets["uniform"].append(s)
    report = evaluate(params, buckets, crop=args.crop)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(report.to_table())
    write_stamp(out.parent, "eval", 0, _stamp_config(args))
    print(report.to_table(), end="")


# parser


def _add_intrinsics(p) -> None:
    p.add_argument("--fx", type=float, help="focal length in pixels (default: from --fov)")
    p.add_argument("--fy", type=float)
    p.add_argument("--cx", type=float)
    p.add_argument("--cy", type=float)
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatlift", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"splatlift {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file supplying defaults for any flag")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic posed dataset with exact depths and masks")
    p.add_argument("kind", nargs="?", default="wall+occluder", help=f"one of {', '.join(SCENE_KINDS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--step", type=float, default=0.2, help="camera spacing (strafe) or degrees (orbit)")
    p.add_argument("--pattern", choices=("strafe", "orbit"), default="strafe")
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--out-dir", required=True)

    p = command("fit", cmd_fit, "optimize a Gaussian scene to a dataset")
    p.add_argument("dataset")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--init-points", type=int, default=3000)
    p.add_argument("--init-mode", choices=("sweep", "frustum"), default="sweep",
                   help="plane-sweep surface points or uniform frustum-intersection points")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="scene file (default: DATASET/scene.gscn)")
    p.add_argument("--ply", help="also export a PLY file")

    p = command("mask", cmd_mask, "compute Gaussian-derived visibility masks for every view pair")
    p.add_argument("dataset")
    p.add_argument("--scene", help="scene file (default: DATASET/scene.gscn)")
    p.add_argument("--normalized", action="store_true", help="divide out the mask ceiling")

    p = command("train", cmd_train, "train the lifter on one or more datasets")
    p.add_argument("dataset", nargs="+")
    p.add_argument("--mask", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--mask-source", choices=("gaussian", "oracle-depth"), default="gaussian")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr-head", type=float, default=1e-3)
    p.add_argument("--lr-trunk", type=float, help="default: lr-head / 10")
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics CSV (default: next to the checkpoint)")

    p = command("lift", cmd_lift, "lift one image to a Gaussian scene")
    p.add_argument("image", help="float image file")
    p.add_argument("--checkpoint", required=True)
    _add_intrinsics(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ply")

    p = command("render", cmd_render, "render a scene file")
    p.add_argument("scene")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    _add_intrinsics(p)
    p.add_argument("--world-to-camera", help="16 numbers, row-major")
    p.add_argument("--eye", help="camera center x,y,z (with --target)")
    p.add_argument("--target", default="0,0,4")
    p.add_argument("--out", required=True, help="output prefix; writes .png and .fimg")
    p.add_argument("--depth-out", help="also write a (depth, valid) float image")

    p = command("eval", cmd_eval, "evaluate a checkpoint on datasets")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="+")
    p.add_argument("--offsets", default="5,10", help="camera-index offsets for the fixed buckets")
    p.add_argument("--window", type=int, default=15, help="half-width of the uniform bucket")
    p.add_argument("--crop", type=float, default=0.05)
    p.add_argument("--out", required=True, help="report JSON; a .txt table is written alongside")
    return ap


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    if path and command in ap._subparsers._group_actions[0].choices:
        sub = ap._subparsers._group_actions[0].choices[command]
        known = {a.dest: a for a in sub._actions if a.option_strings or a.nargs == "?"}
        file_vals = parse_config_file(path)
        unknown = sorted(set(file_vals) - set(known))
        if unknown:
            raise ValueError(f"unknown key(s) in config file: {', '.join(unknown)}")
        defaults = {}
        for k, v in file_vals.items():
            action = known[k]
            if isinstance(action, argparse.BooleanOptionalAction) or action.nargs == 0:
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[k] = action.type(v)
            else:
                defaults[k] = v
            action.required = False
        sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, FileNotFoundError) as exc:
        print(f"splatlift: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except FormatError as exc:
        print(f"splatlift: format error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"splatlift: missing file: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"splatlift: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
