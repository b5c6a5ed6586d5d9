"""Command-line entry point: ``fewshot-nerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .correspondence import CorrespondenceError, load_correspondences, load_labels, save_correspondences, synthetic_match
from .evaluation import ablate_tau, evaluate, score_views, training_data, write_tau_table
from .field import FieldNumericalError
from .io import SCENE_FILE, load_scene_dir, save_depth, save_png, save_scene_dir
from .renderer import render_image
from .scenes import PRESETS, Scene, make_scene, oracle_render
from .trainer import TrainConfig, load_training_checkpoint, train

log = logging.getLogger("fewshot_nerf")


class CliError(Exception):
    pass


def _stacks(path, scene: Scene, labels: bool = False) -> dict:
    if path is None:
        return {}
    sizes = {i: (c.intrinsics.width, c.intrinsics.height) for i, c in enumerate(scene.cameras)}
    stacks = load_correspondences(path, sizes)
    side = Path(f"{path}.labels")
    if labels and side.exists():
        load_labels(side, stacks)
    return {s.target_image: s for s in stacks}


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for flag, key in (("no_geo", "use_geo"), ("no_freq", "use_freq"), ("no_occ", "use_occ"), ("no_filter", "use_filter")):
        if getattr(args, flag, False):
            over[key] = False
    return replace(cfg, **over)


# subcommands -------------------------------------------------------------------


def cmd_make_scene(args) -> int:
    scene = make_scene(args.preset, args.size)
    views = {i: oracle_render(scene, i, args.n_quad) for i in range(len(scene.cameras))}
    save_scene_dir(args.out, scene, views)
    print(f"wrote {args.preset} ({len(views)} views, {args.size}px) to {args.out}")
    return 0


def cmd_match(args) -> int:
    scene, views = load_scene_dir(args.scene)
    ids = list(scene.train_views)
    stacks = synthetic_match(
        scene, [scene.cameras[i] for i in ids], args.percentile, args.noise_px, args.outlier_rate,
        np.random.default_rng(args.seed), views=[views[i] for i in ids], image_ids=ids,
        max_keypoints=args.max_keypoints,
    )
    save_correspondences(args.out, stacks, labels_path=f"{args.out}.labels")
    n = sum(len(s) for s in stacks)
    bad = sum(len(s.outliers) for s in stacks)
    print(f"wrote {n} correspondences ({bad} injected outliers) to {args.out}")
    return 0


def cmd_train(args) -> int:
    scene, views = load_scene_dir(args.scene)
    stacks = _stacks(args.matches, scene)
    cfg = _config(args).resolved(scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(Path(args.scene) / SCENE_FILE, out / SCENE_FILE)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    train(training_data(scene, views, stacks), cfg, out, resume_from=args.resume, progress=args.progress)
    print(f"training finished; checkpoint at {out / 'final.npz'}")
    return 0


def _scene_for_checkpoint(ckpt, scene_dir) -> Scene:
    path = Path(scene_dir) / SCENE_FILE if scene_dir else Path(ckpt).parent / SCENE_FILE
    if not path.is_file():
        raise CliError(f"no scene config at {path}; pass --scene")
    return Scene.load(path)


def cmd_render(args) -> int:
    params, _, cfg, _, _ = load_training_checkpoint(args.checkpoint)
    scene = _scene_for_checkpoint(args.checkpoint, args.scene)
    if not 0 <= args.camera < len(scene.cameras):
        raise CliError(f"camera {args.camera} out of range (scene has {len(scene.cameras)})")
    img, depth = render_image(params, scene.cameras[args.camera], cfg.near, cfg.far, cfg.N_samples,
                              cfg.total_steps, cfg.t_freq_end, None, freq_reg=cfg.use_freq)
    save_png(args.out, img)
    depth_path = Path(args.out).with_suffix(".depth.bin")
    save_depth(depth_path, depth)
    print(f"wrote {args.out} and {depth_path}")
    return 0


def _print_report(rep) -> None:
    for v in rep.per_view:
        tag = "identical" if v.identical else f"{v.psnr:.3f} dB"
        print(f"view {v.view}: psnr {tag}  ssim {v.ssim:.4f}  depth_mae {v.depth_mae:.4f}")
    print(f"mean: psnr {rep.psnr:.3f}  ssim {rep.ssim:.4f}  depth_mae {rep.depth_mae:.4f}"
          + ("" if np.isnan(rep.depth_mae_keypoints) else f"  keypoint depth_mae {rep.depth_mae_keypoints:.4f}"))


def cmd_eval(args) -> int:
    scene, views = load_scene_dir(args.scene)
    if args.oracle:
        rep = score_views({v: (views[v].image, views[v].depth) for v in scene.test_views},
                          {v: views[v] for v in scene.test_views})
    else:
        params, _, cfg, _, _ = load_training_checkpoint(args.checkpoint)
        rep = evaluate(params, scene, views, cfg, _stacks(args.matches, scene))
    rep.to_csv(args.out)
    _print_report(rep)
    return 0


def cmd_ablate_tau(args) -> int:
    scene, views = load_scene_dir(args.scene)
    stacks = _stacks(args.matches, scene)
    if not stacks:
        raise CliError("ablate-tau needs --matches")
    taus = [float(t) for t in args.taus.split(",") if t.strip()]
    if not taus or any(t <= 0 for t in taus):
        raise CliError("--taus must be a comma-separated list of positive numbers")
    rows = ablate_tau(scene, views, stacks, _config(args), taus, args.workdir)
    write_tau_table(args.out, rows)
    for r in rows:
        print(f"tau {r.tau_ray:g}: kept {r.kept_fraction:.3f}  psnr {r.psnr:.3f}  ssim {r.ssim:.4f}  "
              f"keypoint depth_mae {r.depth_mae_keypoints:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-nerf", description="Few-view radiance fields with matched-ray geometry.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", help="build a preset scene and its oracle views")
    s.add_argument("--preset", required=True, choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-quad", type=int, default=1024)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("match", help="synthetic correspondences between the training views")
    s.add_argument("--scene", required=True)
    s.add_argument("--noise-px", type=float, default=0.0)
    s.add_argument("--outlier-rate", type=float, default=0.0)
    s.add_argument("--percentile", type=float, default=90.0)
    s.add_argument("--max-keypoints", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    def train_flags(s):
        s.add_argument("--scene", required=True)
        s.add_argument("--matches")
        s.add_argument("--config", help="JSON file with TrainConfig keys")
        s.add_argument("--seed", type=int)
        for name in ("geo", "freq", "occ", "filter"):
            s.add_argument(f"--no-{name}", action="store_true")

    s = sub.add_parser("train", help="optimise a field on the training views")
    train_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--progress", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one camera from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--scene", help="scene directory (default: next to the checkpoint)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="score held-out views")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="score the oracle views against themselves")
    s.add_argument("--scene", required=True)
    s.add_argument("--matches", help="adds keypoint depth error")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-tau", help="sweep the ray-distance threshold")
    train_flags(s)
    s.add_argument("--taus", required=True)
    s.add_argument("--workdir", help="keep per-threshold training runs here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate_tau)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", False) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CorrespondenceError, FieldNumericalError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
