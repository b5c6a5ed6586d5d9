"""Training objective: photometric MSE, confidence-weighted geometry consistency
between paired rays, and a near-camera density penalty."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

NORM_SMOOTHING = 1e-12
LOG_FIELDS = ("step", "color", "geo", "occ", "total", "lr", "num_pairs_kept")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def color_loss(rendered, ground_truth) -> Tensor:
    """Mean squared error over every channel of every ray."""
    r = _t(rendered)
    gt = np.asarray(ground_truth.data if isinstance(ground_truth, Tensor) else ground_truth)
    if r.shape != gt.shape or r.data.size == 0:
        raise ValueError(f"rendered {r.shape} and ground truth {gt.shape} must match and be non-empty")
    diff = r - gt.astype(r.dtype)
    return (diff * diff).mean()


@dataclass
class GeoLoss:
    value: Tensor
    supervised: bool  # False when there was nothing to supervise this step


def geometry_loss(p_t, p_ref, eps) -> GeoLoss:
    """Confidence-weighted mean distance between paired 3D points.

    ``p_t`` and ``p_ref`` are (K, 3); the norm is smoothed as sqrt(|.|^2 + 1e-12)
    so the gradient stays finite at coincident points.
    """
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    if np.any(eps < 0):
        raise ValueError("confidences must be non-negative")
    if eps.size == 0 or eps.sum() == 0:
        return GeoLoss(Tensor(np.zeros(())), False)
    a, b = _t(p_t), _t(p_ref)
    if a.shape != b.shape or a.shape[0] != eps.size:
        raise ValueError("point lists and confidences must have equal length")
    diff = a - b
    dist = ((diff * diff).sum(axis=-1) + NORM_SMOOTHING).sqrt()
    w = (eps / eps.sum()).astype(dist.dtype)
    return GeoLoss((dist * w).sum(), True)


def points_from_depth(origins, directions, depth: Tensor) -> Tensor:
    """Push rays out to their rendered depth: p = o + z d."""
    dtype = depth.dtype
    z = depth.reshape(-1, 1)
    return z * np.asarray(directions, dtype=dtype) + np.asarray(origins, dtype=dtype)


def near_zone_samples(n_samples: int) -> int:
    return max(1, math.ceil(0.1 * n_samples))


def occlusion_loss(sigma_near) -> Tensor:
    """Mean over rays of the mean density of the first K samples; input is (rays, K)."""
    s = _t(sigma_near)
    if s.data.ndim != 2 or s.shape[1] < 1:
        raise ValueError("expected a (rays, K) matrix with K >= 1")
    if np.any(s.data < 0):
        raise ValueError("densities must be non-negative")
    return s.mean(axis=-1).mean()


@dataclass
class LossBreakdown:
    color_loss: float
    geo_loss: float
    occ_loss: float
    total: float
    geo_supervised: bool = True


def total_loss(color, geo, occ, lambda_geo: float = 0.005, lambda_occ: float = 0.01):
    """Weighted objective. Accepts tensors or floats; returns (total, breakdown).

    ``total`` is a Tensor whenever any part is one.
    """
    if lambda_geo < 0 or lambda_occ < 0:
        raise ValueError("loss weights must be non-negative")
    parts = [color, geo, occ]
    vals = [float(p.data) if isinstance(p, Tensor) else float(p) for p in parts]
    total = color
    if lambda_geo:
        total = total + geo * lambda_geo
    if lambda_occ:
        total = total + occ * lambda_occ
    bd = LossBreakdown(vals[0], vals[1], vals[2], vals[0] + lambda_geo * vals[1] + lambda_occ * vals[2])
    return total, bd


class TrainingLog:
    """Append-only CSV of per-step loss terms."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        if not resume or not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, step: int, bd: LossBreakdown, lr: float, num_pairs_kept: int) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step, repr(bd.color_loss), repr(bd.geo_loss), repr(bd.occ_loss), repr(bd.total), repr(lr),
                 num_pairs_kept]
            )

    def truncate_after(self, step: int) -> None:
        """Drop rows beyond ``step`` (used when resuming from an older checkpoint)."""
        with open(self.path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerows(keep)
