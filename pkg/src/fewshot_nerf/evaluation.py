"""Held-out evaluation of trained fields and the ablation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .field import FieldParams
from .metrics import depth_mae, psnr_flagged, ssim
from .renderer import render_image, render_pixels
from .trainer import TrainConfig, TrainingData, train

REPORT_FIELDS = ("view", "psnr", "identical", "ssim", "depth_mae")


@dataclass
class ViewScore:
    view: int
    psnr: float
    identical: bool
    ssim: float
    depth_mae: float


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    depth_mae: float
    depth_mae_keypoints: float = float("nan")
    per_view: list = field(default_factory=list)

    @property
    def identical(self) -> bool:
        return bool(self.per_view) and all(v.identical for v in self.per_view)

    def to_csv(self, path) -> None:
        """One row per view, then a ``mean`` row; keypoint depth error is appended when known."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for v in self.per_view:
                w.writerow([v.view, repr(float(v.psnr)), int(v.identical), repr(float(v.ssim)), repr(float(v.depth_mae))])
            w.writerow(["mean", repr(self.psnr), int(self.identical), repr(self.ssim), repr(self.depth_mae)])
            if not math.isnan(self.depth_mae_keypoints):
                w.writerow(["keypoints", "", "", "", repr(self.depth_mae_keypoints)])


def score_views(preds: dict, oracles: dict) -> EvalReport:
    """Compare predicted (image, depth) pairs with oracle views, keyed by view index."""
    if not preds or set(preds) != set(oracles):
        raise ValueError("predictions and oracle views must cover the same non-empty set of views")
    rows = []
    for v in sorted(preds):
        img, depth = preds[v]
        ora = oracles[v]
        p, same = psnr_flagged(img, ora.image)
        rows.append(ViewScore(v, p, same, ssim(img, ora.image), depth_mae(depth, ora.depth)))
    return EvalReport(
        psnr=float(np.mean([r.psnr for r in rows])),
        ssim=float(np.mean([r.ssim for r in rows])),
        depth_mae=float(np.mean([r.depth_mae for r in rows])),
        per_view=rows,
    )


def keypoint_depth_mae(params: FieldParams, cameras: dict, oracles: dict, stacks: dict, cfg: TrainConfig) -> float:
    """Rendered-vs-oracle depth error at the matcher's keypoints of the training views."""
    errs = []
    for v, st in sorted(stacks.items()):
        if not len(st) or v not in oracles:
            continue
        kp = st.keypoints().astype(int)
        _, depth = render_pixels(params, cameras[v], kp, cfg.near, cfg.far, cfg.N_samples, cfg.total_steps,
                                 cfg.t_freq_end, None, freq_reg=cfg.use_freq)
        errs.append(np.abs(depth - oracles[v].depth[kp[:, 1], kp[:, 0]]))
    if not errs:
        return float("nan")
    return float(np.mean(np.concatenate(errs)))


def evaluate(params: FieldParams, scene, oracles: dict, cfg: TrainConfig, stacks: dict | None = None,
             views=None) -> EvalReport:
    """Render the held-out views (deterministic bin-centre samples) and score them.

    ``cfg`` must be resolved against ``scene``. ``stacks`` enables the keypoint depth error.
    """
    views = scene.test_views if views is None else views
    preds = {
        v: render_image(params, scene.cameras[v], cfg.near, cfg.far, cfg.N_samples, cfg.total_steps,
                        cfg.t_freq_end, None, freq_reg=cfg.use_freq)
        for v in views
    }
    report = score_views(preds, {v: oracles[v] for v in views})
    if stacks:
        cams = dict(enumerate(scene.cameras))
        report.depth_mae_keypoints = keypoint_depth_mae(params, cams, oracles, stacks, cfg)
    return report


def training_data(scene, oracles: dict, stacks: dict) -> TrainingData:
    return TrainingData(
        dict(enumerate(scene.cameras)),
        {v: oracles[v].image for v in scene.train_views},
        list(scene.train_views),
        dict(stacks),
    )


def run_experiment(scene, oracles: dict, stacks: dict, cfg: TrainConfig, out_dir=None):
    """Train on the scene's training views, then evaluate. Returns (TrainResult, EvalReport)."""
    cfg = cfg.resolved(scene)
    result = train(training_data(scene, oracles, stacks), cfg, out_dir)
    return result, evaluate(result.params, scene, oracles, cfg, stacks)


@dataclass
class TauRow:
    tau_ray: float
    kept_fraction: float
    psnr: float
    ssim: float
    depth_mae_keypoints: float


def ablate_tau(scene, oracles: dict, stacks: dict, base: TrainConfig, taus, out_dir=None) -> list:
    """Train once per threshold and tabulate quality against it.

    ``kept_fraction`` is the share of sampled pairs that passed the filter over the whole run.
    """
    rows = []
    for tau in taus:
        cfg = replace(base, tau_ray=float(tau), use_filter=True)
        sub = None if out_dir is None else Path(out_dir) / f"tau_{tau:g}"
        result, rep = run_experiment(scene, oracles, stacks, cfg, sub)
        sampled = sum(h.num_pairs_sampled for h in result.history)
        kept = sum(h.num_pairs_kept for h in result.history)
        rows.append(TauRow(float(tau), kept / sampled if sampled else float("nan"), rep.psnr, rep.ssim,
                           rep.depth_mae_keypoints))
    return rows


def write_tau_table(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_ray", "kept_fraction", "psnr", "ssim", "depth_mae_keypoints"])
        for r in rows:
            w.writerow([repr(r.tau_ray), repr(r.kept_fraction), repr(r.psnr), repr(r.ssim),
                        repr(r.depth_mae_keypoints)])
