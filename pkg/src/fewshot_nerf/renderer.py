"""Stratified ray sampling and differentiable volume-rendering quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .field import FieldParams, field_forward
from .geometry import Ray, generate_rays

MAX_OPTICAL_DEPTH = 80.0


@dataclass
class SampleSet:
    t_values: np.ndarray  # (..., N)
    deltas: np.ndarray  # (..., N)


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    weights: np.ndarray
    transmittance: np.ndarray


def stratified_sample(t_near: float, t_far: float, N: int, rng, n_rays: int | None = None) -> SampleSet:
    """One uniform draw per equal-width bin of ``[t_near, t_far]``.

    With ``n_rays`` set, returns independent samples for that many rays, shape (n_rays, N).
    """
    if not (t_far > t_near >= 0) or N < 1:
        raise ValueError(f"invalid sampling range [{t_near}, {t_far}] with N={N}")
    shape = (N,) if n_rays is None else (n_rays, N)
    width = (t_far - t_near) / N
    # bins are half-open: keep the top edge out even after rounding
    t = t_near + (np.arange(N) + rng.random(shape)) * width
    t = np.minimum(t, np.nextafter(t_near + (np.arange(N) + 1) * width, -np.inf))
    deltas = np.empty_like(t)
    deltas[..., :-1] = t[..., 1:] - t[..., :-1]
    deltas[..., -1] = t_far - t[..., -1]
    return SampleSet(t, deltas)


def midpoint_sample(t_near: float, t_far: float, N: int, n_rays: int) -> SampleSet:
    """Bin centres of ``N`` equal bins; the deterministic variant used for evaluation."""
    if not (t_far > t_near >= 0) or N < 1:
        raise ValueError(f"invalid sampling range [{t_near}, {t_far}] with N={N}")
    width = (t_far - t_near) / N
    t = np.broadcast_to(t_near + (np.arange(N) + 0.5) * width, (n_rays, N)).copy()
    deltas = np.full_like(t, width)
    deltas[:, -1] = t_far - t[:, -1]
    return SampleSet(t, deltas)


def composite(sigma: Tensor, color: Tensor, t_values: np.ndarray, deltas: np.ndarray):
    """Alpha-composite samples along rays.

    ``sigma`` is (R, N), ``color`` (R, N, 3). Returns tensors
    (color (R, 3), depth (R,), weights (R, N), transmittance (R, N)).
    """
    dtype = sigma.dtype
    optical = (sigma * deltas.astype(dtype)).minimum(MAX_OPTICAL_DEPTH)
    trans = (-optical.cumsum_exclusive(axis=-1)).exp()
    alpha = 1.0 - (-optical).exp()
    weights = trans * alpha
    rgb = (weights.reshape(*weights.shape, 1) * color).sum(axis=-2)
    depth = (weights * t_values.astype(dtype)).sum(axis=-1)
    return rgb, depth, weights, trans


def render(sigmas, colors, samples: SampleSet) -> RenderResult:
    """Render a single ray from per-sample densities (N,) and colors (N, 3)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ValueError("densities must be non-negative")
    if sigmas.shape != samples.t_values.shape or colors.shape != (*sigmas.shape, 3):
        raise ValueError("sample, density and color lengths disagree")
    rgb, depth, w, tr = composite(Tensor(sigmas[None]), Tensor(colors[None]), samples.t_values[None], samples.deltas[None])
    return RenderResult(rgb.data[0], float(depth.data[0]), w.data[0], tr.data[0])


@dataclass
class RayBatchRender:
    color: Tensor  # (R, 3)
    depth: Tensor  # (R,)
    weights: Tensor  # (R, N)
    transmittance: Tensor
    sigma: Tensor  # (R, N)
    samples: SampleSet


def render_rays(
    params: FieldParams,
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    n_samples: int,
    step: int,
    freq_end: int,
    rng,
    *,
    freq_reg: bool = True,
) -> RayBatchRender:
    """Sample, query the field and composite a batch of rays; differentiable in ``params``.

    ``rng=None`` switches to deterministic bin-centre samples.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    if rng is None:
        samples = midpoint_sample(near, far, n_samples, R)
    else:
        samples = stratified_sample(near, far, n_samples, rng, n_rays=R)
    pts = origins[:, None, :] + samples.t_values[..., None] * directions[:, None, :]
    sigma, color = field_forward(params, pts, directions, step, freq_end, freq_reg=freq_reg)
    rgb, depth, w, tr = composite(sigma, color, samples.t_values, samples.deltas)
    return RayBatchRender(rgb, depth, w, tr, sigma, samples)


def render_ray(params: FieldParams, ray: Ray, t_near, t_far, N, t, T_sched, rng, *, freq_reg=True) -> RenderResult:
    out = render_rays(params, ray.origin, ray.direction, t_near, t_far, N, t, T_sched, rng, freq_reg=freq_reg)
    return RenderResult(
        out.color.data[0].astype(np.float64),
        float(out.depth.data[0]),
        out.weights.data[0].astype(np.float64),
        out.transmittance.data[0].astype(np.float64),
    )


def render_pixels(
    params: FieldParams,
    camera,
    pixels,
    near: float,
    far: float,
    n_samples: int,
    step: int,
    freq_end: int,
    rng=None,
    *,
    chunk: int = 2048,
    freq_reg: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Colors (P, 3) and depths (P,) at pixel indices (P, 2) of ``camera``, without recording a graph."""
    o, d = generate_rays(camera.intrinsics, camera.pose, pixels)
    rgb = np.empty((len(o), 3))
    depth = np.empty(len(o))
    with no_grad():
        for s in range(0, len(o), chunk):
            out = render_rays(params, o[s:s + chunk], d[s:s + chunk], near, far, n_samples, step, freq_end, rng,
                              freq_reg=freq_reg)
            rgb[s:s + chunk] = out.color.data
            depth[s:s + chunk] = out.depth.data
    return rgb, depth


def render_image(params: FieldParams, camera, near, far, n_samples, step, freq_end, rng=None, **kw):
    """Full (H, W, 3) image and (H, W) depth map seen from ``camera``."""
    intr = camera.intrinsics
    vv, uu = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    rgb, depth = render_pixels(params, camera, pix, near, far, n_samples, step, freq_end, rng, **kw)
    return rgb.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)
