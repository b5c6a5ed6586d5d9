"""Optimisation loop: Adam with warmup + exponential decay, two-stage gradient
clipping, mixed photometric / correspondence ray batches, and checkpointed,
resumable training."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ._alloc import tune_allocator
from .correspondence import (
    MatchStack,
    PairedRays,
    filter_pairs,
    prefilter_stacks,
    sample_pairs,
)
from .field import EncodingConfig, FieldConfig, FieldParams, backward, load_checkpoint, save_checkpoint
from .geometry import generate_rays
from .losses import (
    LossBreakdown,
    TrainingLog,
    color_loss,
    geometry_loss,
    near_zone_samples,
    occlusion_loss,
    points_from_depth,
    total_loss,
)
from .renderer import render_rays

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 5000
    lr_init: float = 2e-3
    lr_final: float = 2e-5
    warmup_steps: int = 512
    warmup_mult: float = 0.01
    clip_value: float = 0.1
    clip_norm: float = 0.1
    batch_rays: int = 1024
    n_pair_rays: int = 50
    lambda_geo: float = 0.005
    lambda_occ: float = 0.01
    tau_ray: float | None = None  # None: 0.01 x scene diameter
    t_freq_end: int | None = None  # None: total_steps
    seed: int = 0
    N_samples: int = 128
    near: float | None = None  # None: taken from the scene
    far: float | None = None
    # ablation switches
    use_geo: bool = True
    use_freq: bool = True
    use_occ: bool = True
    use_filter: bool = True
    prefilter: bool = False
    # field architecture
    hidden_width: int = 64
    hidden_layers: int = 4
    skip_layer: int = 2
    color_width: int = 32
    L_pos: int = 10
    L_dir: int = 4
    mask_mode: str = "band"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError("need lr_init >= lr_final > 0")
        if self.batch_rays < 2 * self.n_pair_rays:
            raise ValueError("batch_rays must cover both ends of every pair ray")

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            encoding=EncodingConfig(self.L_pos, self.L_dir, True, self.mask_mode),
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            skip_layer=self.skip_layer,
            color_width=self.color_width,
            seed=self.seed,
        )

    def resolved(self, scene) -> "TrainConfig":
        """Fill scene-dependent defaults."""
        return replace(
            self,
            tau_ray=self.tau_ray if self.tau_ray is not None else 0.01 * scene.diameter,
            t_freq_end=self.t_freq_end if self.t_freq_end is not None else max(self.total_steps, 1),
            near=self.near if self.near is not None else scene.near,
            far=self.far if self.far is not None else scene.far,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Exponential decay from lr_init to lr_final, times a linear warmup ramp from warmup_mult to 1."""
    T = max(cfg.total_steps, 1)
    frac = min(max(step / T, 0.0), 1.0)
    base = cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** frac
    if cfg.warmup_steps > 0:
        ramp = min(step / cfg.warmup_steps, 1.0)
        base *= cfg.warmup_mult + (1.0 - cfg.warmup_mult) * ramp
    return base


def clip_gradients(grads: list, clip_value: float, clip_norm: float) -> list:
    """Clamp each component to +-clip_value, then cap the global L2 norm at clip_norm."""
    if clip_value <= 0 or clip_norm <= 0:
        raise ValueError("clip thresholds must be positive")
    out = [np.clip(g, -clip_value, clip_value) for g in grads]
    norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in out))
    if norm > clip_norm:
        scale = clip_norm / norm
        out = [g * np.asarray(scale, dtype=g.dtype) for g in out]
        # low-precision rounding can leave the norm a hair above the cap; shrink by a few ulps until it fits
        eps = max(np.finfo(g.dtype).eps for g in out)
        for k in range(1, 9):
            norm2 = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in out))
            if norm2 <= clip_norm:
                break
            out = [g * np.asarray(clip_norm / norm2 * (1 - 2 * k * eps), dtype=g.dtype) for g in out]
    return out


class AdamState:
    def __init__(self, params: FieldParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


class OptimizerError(FloatingPointError):
    pass


def adam_step(params: FieldParams, grads: list, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updates = []
    for (name, t), g, m, v in zip(params.tensors.items(), grads, state.m, state.v):
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {t.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(upd)):
            raise OptimizerError(f"non-finite Adam update for {name} at step {state.step}")
        updates.append(upd)
    for t, upd in zip(params.tensors.values(), updates):
        t.data -= upd.astype(t.data.dtype, copy=False)


# ray batches -------------------------------------------------------------------


@dataclass
class TrainingData:
    """Everything train_step needs about the captured views."""

    cameras: dict  # image index -> Camera
    images: dict  # image index -> (H, W, 3) float array
    train_views: list
    stacks: dict  # target image index -> MatchStack

    def __post_init__(self):
        self._pool = None
        self._pool_geo = None

    def pixel_pool(self, exclude_keypoints: bool) -> np.ndarray:
        """(P, 3) int array of (view, u, v) photometric candidates."""
        cache = "_pool_geo" if exclude_keypoints else "_pool"
        if getattr(self, cache) is None:
            rows = []
            for v in self.train_views:
                h, w = self.images[v].shape[:2]
                keep = np.ones((h, w), dtype=bool)
                if exclude_keypoints and v in self.stacks:
                    kp = self.stacks[v].keypoints().astype(int)
                    keep[kp[:, 1], kp[:, 0]] = False
                vv, uu = np.nonzero(keep)
                rows.append(np.stack([np.full_like(uu, v), uu, vv], axis=-1))
            setattr(self, cache, np.concatenate(rows, axis=0))
        return getattr(self, cache)


def _photometric_rays(data: TrainingData, picks: np.ndarray):
    o = np.empty((len(picks), 3))
    d = np.empty((len(picks), 3))
    rgb = np.empty((len(picks), 3))
    for v in np.unique(picks[:, 0]):
        sel = picks[:, 0] == v
        cam = data.cameras[int(v)]
        o[sel], d[sel] = generate_rays(cam.intrinsics, cam.pose, picks[sel, 1:])
        rgb[sel] = data.images[int(v)][picks[sel, 2], picks[sel, 1]]
    return o, d, rgb


@dataclass
class StepInfo:
    breakdown: LossBreakdown
    lr: float
    num_pairs_kept: int
    num_pairs_sampled: int
    photometric_rays: int


def geometry_active(cfg: TrainConfig, data: TrainingData) -> bool:
    return cfg.use_geo and cfg.lambda_geo > 0 and any(len(s) for s in data.stacks.values())


def train_step(data: TrainingData, params: FieldParams, state: AdamState, cfg: TrainConfig, step: int, rng) -> StepInfo:
    """One optimisation step. ``cfg`` must be resolved against the scene."""
    if step >= cfg.total_steps:
        raise ValueError("step beyond total_steps")
    pairs = PairedRays.empty()
    sampled = 0
    use_geo = geometry_active(cfg, data)
    if use_geo:
        target = data.train_views[rng.integers(len(data.train_views))]
        stack = data.stacks.get(target, MatchStack(target))
        pairs = sample_pairs(stack, cfg.n_pair_rays, data.cameras, rng)
        sampled = len(pairs)
        if cfg.use_filter and not cfg.prefilter:
            pairs = filter_pairs(pairs, cfg.tau_ray)
    n_pairs = len(pairs)
    n_photo = cfg.batch_rays - 2 * n_pairs
    pool = data.pixel_pool(exclude_keypoints=use_geo)
    picks = pool[rng.choice(len(pool), size=n_photo, replace=False)]
    po, pd, prgb = _photometric_rays(data, picks)

    if n_pairs:
        px = pairs.target_pixels.astype(int)
        tgt_rgb = data.images[target][px[:, 1], px[:, 0]]
        origins = np.concatenate([po, pairs.target_origins, pairs.ref_origins])
        dirs = np.concatenate([pd, pairs.target_dirs, pairs.ref_dirs])
        gt = np.concatenate([prgb, tgt_rgb])
    else:
        origins, dirs, gt = po, pd, prgb

    params.zero_grad()
    out = render_rays(
        params, origins, dirs, cfg.near, cfg.far, cfg.N_samples, step, cfg.t_freq_end, rng, freq_reg=cfg.use_freq
    )
    n_sup = n_photo + n_pairs
    l_color = color_loss(out.color[:n_sup], gt)
    geo_sup = False
    l_geo = 0.0
    if n_pairs:
        depth_t = out.depth[n_photo:n_sup]
        depth_r = out.depth[n_sup:]
        p_t = points_from_depth(pairs.target_origins, pairs.target_dirs, depth_t)
        p_r = points_from_depth(pairs.ref_origins, pairs.ref_dirs, depth_r)
        g = geometry_loss(p_t, p_r, pairs.confidences)
        l_geo, geo_sup = g.value, g.supervised
    elif use_geo:
        log.debug("step %d: no correspondence pairs survived the filter", step)
    l_occ = 0.0
    lambda_occ = cfg.lambda_occ if cfg.use_occ else 0.0
    if lambda_occ:
        l_occ = occlusion_loss(out.sigma[:, : near_zone_samples(cfg.N_samples)])
    lambda_geo = cfg.lambda_geo if use_geo else 0.0
    total, bd = total_loss(l_color, l_geo, l_occ, lambda_geo, lambda_occ)
    bd.geo_supervised = geo_sup
    backward(total)
    grads = clip_gradients(params.grads(), cfg.clip_value, cfg.clip_norm)
    lr = lr_at(step, cfg)
    adam_step(params, grads, state, lr)
    return StepInfo(bd, lr, n_pairs, sampled, n_photo)


# full runs -----------------------------------------------------------------------


@dataclass
class TrainResult:
    params: FieldParams
    state: AdamState
    history: list  # list of StepInfo
    config: TrainConfig


def _rng_state_json(rng) -> str:
    return json.dumps(rng.bit_generator.state)


def save_training_checkpoint(path, params: FieldParams, state: AdamState, cfg: TrainConfig, step: int, rng) -> None:
    extra = {f"adam_m/{i}": m for i, m in enumerate(state.m)}
    extra.update({f"adam_v/{i}": v for i, v in enumerate(state.v)})
    extra.update(
        {"step": step, "adam_step": state.step, "train_config": cfg.to_dict(), "rng_state": _rng_state_json(rng)}
    )
    save_checkpoint(path, params, extra)


def load_training_checkpoint(path):
    """Returns (params, AdamState, TrainConfig, next_step, rng)."""
    params, meta, extra = load_checkpoint(path)
    state = AdamState(params)
    n = len(state.m)
    state.m = [extra[f"adam_m/{i}"] for i in range(n)]
    state.v = [extra[f"adam_v/{i}"] for i in range(n)]
    state.step = int(meta["adam_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    cfg = TrainConfig.from_dict(meta["train_config"])
    return params, state, cfg, int(meta["step"]), rng


def train(
    data: TrainingData,
    cfg: TrainConfig,
    out_dir=None,
    *,
    resume_from=None,
    stop_after: int | None = None,
    progress: bool = False,
) -> TrainResult:
    """Run ``cfg.total_steps`` steps (``cfg`` resolved against the scene).

    With ``out_dir`` set, writes ``train_log.csv`` and ``ckpt_XXXXXX.npz`` every
    ``checkpoint_every`` steps plus ``final.npz``. ``resume_from`` continues a run
    from a training checkpoint; ``stop_after`` ends early (simulated interruption).
    """
    if cfg.near is None or cfg.tau_ray is None or cfg.t_freq_end is None:
        raise ValueError("resolve the config against a scene before training")
    tune_allocator()
    if cfg.prefilter and cfg.use_filter:
        data = TrainingData(
            data.cameras, data.images, data.train_views,
            {s.target_image: s for s in prefilter_stacks(list(data.stacks.values()), data.cameras, cfg.tau_ray)},
        )
    out = Path(out_dir) if out_dir is not None else None
    if resume_from is not None:
        params, state, saved_cfg, start, rng = load_training_checkpoint(resume_from)
        if saved_cfg != cfg:
            raise ValueError("checkpoint was written with a different training config")
    else:
        params = FieldParams.init(cfg.field_config())
        state = AdamState(params)
        start = 0
        rng = np.random.default_rng(cfg.seed)
    tlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        tlog = TrainingLog(out / "train_log.csv", resume=resume_from is not None)
        if resume_from is not None:
            tlog.truncate_after(start - 1)
    history = []
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    for step in range(start, end):
        info = train_step(data, params, state, cfg, step, rng)
        history.append(info)
        if tlog is not None:
            tlog.append(step, info.breakdown, info.lr, info.num_pairs_kept)
        if progress and (step % 250 == 0 or step == end - 1):
            b = info.breakdown
            log.info("step %5d color %.5f geo %.4f occ %.4f lr %.2e pairs %d",
                     step, b.color_loss, b.geo_loss, b.occ_loss, info.lr, info.num_pairs_kept)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_checkpoint(out / f"ckpt_{step + 1:06d}.npz", params, state, cfg, step + 1, rng)
    if out is not None:
        save_training_checkpoint(out / "final.npz", params, state, cfg, end, rng)
    return TrainResult(params, state, history, cfg)
