"""Correspondence stacks: loading, max-confidence aggregation, synthetic
ground-truth matching, the ray-distance consistency filter and pair sampling.

File format, one record per line (``#`` starts a comment)::

    target_img target_u target_v ref_img ref_u ref_v confidence
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Camera, generate_rays, ray_min_distance_batch


class CorrespondenceError(ValueError):
    pass


@dataclass(frozen=True)
class MatchRecord:
    target_image: int
    target_pixel: tuple
    ref_image: int
    ref_pixel: tuple
    confidence: float

    def __post_init__(self):
        if self.target_image == self.ref_image:
            raise CorrespondenceError(f"record matches image {self.target_image} with itself: {self}")
        if not (0.0 <= self.confidence <= 1.0):
            raise CorrespondenceError(f"confidence outside [0, 1]: {self}")


@dataclass
class MatchStack:
    target_image: int
    records: dict = field(default_factory=dict)  # target pixel -> MatchRecord
    # ground-truth outlier keypoints, only filled by the synthetic matcher
    outliers: set = field(default_factory=set)

    def __len__(self):
        return len(self.records)

    def keypoints(self) -> np.ndarray:
        return np.array(list(self.records), dtype=np.float64).reshape(-1, 2)


@dataclass
class PairedRays:
    target_origins: np.ndarray
    target_dirs: np.ndarray
    ref_origins: np.ndarray
    ref_dirs: np.ndarray
    confidences: np.ndarray
    target_pixels: np.ndarray  # (K, 2), kept for photometric supervision and bookkeeping
    ref_images: np.ndarray

    def __len__(self):
        return len(self.confidences)

    @classmethod
    def empty(cls) -> "PairedRays":
        z3 = np.zeros((0, 3))
        return cls(z3, z3, z3, z3, np.zeros(0), np.zeros((0, 2)), np.zeros(0, dtype=int))

    def subset(self, keep: np.ndarray) -> "PairedRays":
        return PairedRays(
            self.target_origins[keep], self.target_dirs[keep], self.ref_origins[keep],
            self.ref_dirs[keep], self.confidences[keep], self.target_pixels[keep], self.ref_images[keep],
        )


def _better(new: MatchRecord, old: MatchRecord) -> bool:
    if new.confidence != old.confidence:
        return new.confidence > old.confidence
    return new.ref_image < old.ref_image


def aggregate_stacks(stacks: list) -> MatchStack:
    """Merge per-reference stacks of one target image, keeping the most confident match per keypoint.

    Equal confidences resolve to the lowest reference image index.
    """
    if not stacks:
        raise CorrespondenceError("nothing to aggregate")
    target = stacks[0].target_image
    out = MatchStack(target)
    for st in stacks:
        if st.target_image != target:
            raise CorrespondenceError(
                f"cannot aggregate stacks of target {st.target_image} with target {target}"
            )
        for key, rec in st.records.items():
            cur = out.records.get(key)
            if cur is None or _better(rec, cur):
                out.records[key] = rec
        out.outliers |= st.outliers
    out.outliers = {k for k in out.outliers if k in out.records}
    return out


def stacks_from_records(records) -> list:
    """Group records into aggregated stacks, one per target image, sorted by target index."""
    by_target: dict = {}
    for rec in records:
        st = by_target.setdefault(rec.target_image, MatchStack(rec.target_image))
        cur = st.records.get(rec.target_pixel)
        if cur is None or _better(rec, cur):
            st.records[rec.target_pixel] = rec
    return [by_target[k] for k in sorted(by_target)]


def load_correspondences(path, image_sizes: dict | None = None) -> list:
    """Parse a correspondence file into aggregated per-target stacks.

    ``image_sizes`` maps image index to (width, height) for bounds checks.
    Rows repeating a (target, keypoint) are merged by maximum confidence.
    """
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 7:
            raise CorrespondenceError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            ti, ri = int(parts[0]), int(parts[3])
            tu, tv, ru, rv, conf = (float(parts[k]) for k in (1, 2, 4, 5, 6))
        except ValueError as exc:
            raise CorrespondenceError(f"{path}:{lineno}: {exc}") from None
        try:
            rec = MatchRecord(ti, (tu, tv), ri, (ru, rv), conf)
        except CorrespondenceError as exc:
            raise CorrespondenceError(f"{path}:{lineno}: {exc}") from None
        if image_sizes is not None:
            for img, (u, v) in ((ti, (tu, tv)), (ri, (ru, rv))):
                if img not in image_sizes:
                    raise CorrespondenceError(f"{path}:{lineno}: unknown image {img} in {rec}")
                w, h = image_sizes[img]
                if not (0 <= u < w and 0 <= v < h):
                    raise CorrespondenceError(f"{path}:{lineno}: pixel out of bounds in {rec}")
        records.append(rec)
    return stacks_from_records(records)


def save_correspondences(path, stacks: list, labels_path=None) -> None:
    """Write stacks in the line format; floats use ``repr`` so they round-trip exactly.

    With ``labels_path`` a sidecar is written holding one 0/1 outlier flag per record line.
    """
    lines = ["# target_img target_u target_v ref_img ref_u ref_v confidence"]
    labels = []
    for st in stacks:
        for key, r in st.records.items():
            lines.append(
                f"{int(r.target_image)} {float(r.target_pixel[0])!r} {float(r.target_pixel[1])!r} "
                f"{int(r.ref_image)} {float(r.ref_pixel[0])!r} {float(r.ref_pixel[1])!r} {float(r.confidence)!r}"
            )
            labels.append("1" if key in st.outliers else "0")
    Path(path).write_text("\n".join(lines) + "\n")
    if labels_path is not None:
        Path(labels_path).write_text("\n".join(labels) + ("\n" if labels else ""))


def load_labels(path, stacks: list) -> list:
    """Attach a ``.labels`` sidecar to stacks loaded from the matching file (same record order)."""
    flags = [ln.strip() == "1" for ln in Path(path).read_text().splitlines() if ln.strip()]
    keys = [(st, k) for st in stacks for k in st.records]
    if len(flags) != len(keys):
        raise CorrespondenceError(f"{path}: {len(flags)} labels for {len(keys)} records")
    for (st, k), bad in zip(keys, flags):
        if bad:
            st.outliers.add(k)
    return stacks


# synthetic matching -----------------------------------------------------------


def detect_keypoints(image: np.ndarray, percentile: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Pixels (u, v) whose Laplacian magnitude is strictly above the given percentile."""
    gray = image @ np.array([0.299, 0.587, 0.114])
    mag = np.abs(ndimage.laplace(gray, mode="nearest"))
    thresh = np.percentile(mag, percentile)
    sel = mag > thresh
    if valid is not None:
        sel &= valid
    v, u = np.nonzero(sel)
    return np.stack([u, v], axis=-1)


def synthetic_match(
    scene,
    cameras: list,
    keypoint_percentile: float,
    noise_px: float,
    outlier_rate: float,
    rng,
    *,
    views: list | None = None,
    image_ids: list | None = None,
    max_keypoints: int | None = None,
    n_quad: int = 1024,
) -> list:
    """Ground-truth matcher: reprojection of oracle-depth keypoints, plus controlled corruption.

    ``cameras`` are the views that take part (usually the training views), with
    global image indices ``image_ids`` (defaults to 0..len-1) and oracle renders
    ``views`` (rendered on demand if omitted). Returns one aggregated stack per
    target image; injected outliers are listed in ``stack.outliers``.
    """
    from .scenes import oracle_render, oracle_render_rays

    if not (0.0 <= outlier_rate < 1.0):
        raise ValueError("outlier_rate must lie in [0, 1)")
    if not hasattr(scene, "density"):
        raise CorrespondenceError("scene provides no oracle depth")
    ids = list(range(len(cameras))) if image_ids is None else list(image_ids)
    if views is None:
        views = [oracle_render(scene, cam, n_quad) for cam in cameras]
    vis_tol = max(0.02 * scene.diameter, 4.0 * (scene.far - scene.near) / n_quad)

    per_target: dict = {i: [] for i in ids}
    for ti, (cam_t, view_t) in enumerate(zip(cameras, views)):
        kp = detect_keypoints(view_t.image, keypoint_percentile, valid=view_t.depth > scene.near)
        if len(kp) == 0:
            continue
        o, d = generate_rays(cam_t.intrinsics, cam_t.pose, kp)
        z = view_t.depth[kp[:, 1], kp[:, 0]]
        pts = o + z[:, None] * d
        for ri, cam_r in enumerate(cameras):
            if ri == ti:
                continue
            proj, zc = cam_r.project(pts)
            ok = (zc > 0) & cam_r.in_bounds(proj)
            if not np.any(ok):
                continue
            idx = np.nonzero(ok)[0]
            ro, rd = generate_rays(cam_r.intrinsics, cam_r.pose, proj[idx])
            _, depth_r = oracle_render_rays(scene, ro, rd, n_quad)
            dist = np.linalg.norm(pts[idx] - cam_r.center, axis=-1)
            visible = np.abs(depth_r - dist) < vis_tol
            st = MatchStack(ids[ti])
            for k, j in enumerate(idx):
                if not visible[k]:
                    continue
                ref = proj[j].copy()
                conf = 1.0
                if noise_px > 0:
                    nz = rng.normal(0.0, noise_px, 2)
                    ref = ref + nz
                    if not cam_r.in_bounds(ref):
                        continue
                    conf = 1.0 / (1.0 + float(np.linalg.norm(nz)))
                key = (float(kp[j, 0]), float(kp[j, 1]))
                st.records[key] = MatchRecord(ids[ti], key, ids[ri], (float(ref[0]), float(ref[1])), conf)
            per_target[ids[ti]].append(st)

    stacks = [aggregate_stacks(s) for i, s in per_target.items() if s]

    if max_keypoints is not None:
        keys = [(si, k) for si, st in enumerate(stacks) for k in st.records]
        if len(keys) > max_keypoints:
            chosen = {keys[i] for i in rng.choice(len(keys), size=max_keypoints, replace=False)}
            for si, st in enumerate(stacks):
                st.records = {k: r for k, r in st.records.items() if (si, k) in chosen}

    if outlier_rate > 0:
        sizes = {i: (c.intrinsics.width, c.intrinsics.height) for i, c in zip(ids, cameras)}
        for st in stacks:
            for key, rec in list(st.records.items()):
                if rng.random() >= outlier_rate:
                    continue
                others = [i for i in ids if i != st.target_image]
                ref_img = others[rng.integers(len(others))]
                w, h = sizes[ref_img]
                ref_px = (float(rng.uniform(0, w)), float(rng.uniform(0, h)))
                ref_px = (min(ref_px[0], np.nextafter(w, 0)), min(ref_px[1], np.nextafter(h, 0)))
                st.records[key] = MatchRecord(st.target_image, key, ref_img, ref_px, float(rng.uniform(0.5, 1.0)))
                st.outliers.add(key)
    return [st for st in stacks if len(st)]


# pairing and filtering ------------------------------------------------------------


def pairs_from_records(records: list, cameras: dict) -> PairedRays:
    """Back-project both ends of each record into world rays. ``cameras`` maps image index to Camera."""
    if not records:
        return PairedRays.empty()
    tgt = np.array([r.target_pixel for r in records], dtype=np.float64)
    ref = np.array([r.ref_pixel for r in records], dtype=np.float64)
    to = np.empty((len(records), 3))
    td = np.empty_like(to)
    ro = np.empty_like(to)
    rd = np.empty_like(to)
    t_ids = np.array([r.target_image for r in records])
    r_ids = np.array([r.ref_image for r in records])
    for img in np.unique(t_ids):
        sel = t_ids == img
        cam: Camera = cameras[int(img)]
        to[sel], td[sel] = generate_rays(cam.intrinsics, cam.pose, tgt[sel])
    for img in np.unique(r_ids):
        sel = r_ids == img
        cam = cameras[int(img)]
        ro[sel], rd[sel] = generate_rays(cam.intrinsics, cam.pose, ref[sel])
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    return PairedRays(to, td, ro, rd, conf, tgt, r_ids)


def sample_pairs(stack: MatchStack, n_t: int, cameras: dict, rng) -> PairedRays:
    """Draw ``min(n_t, len(stack))`` records uniformly without replacement and build their rays."""
    if n_t < 0:
        raise ValueError("n_t must be non-negative")
    k = min(n_t, len(stack))
    if k == 0:
        return PairedRays.empty()
    recs = list(stack.records.values())
    idx = rng.choice(len(recs), size=k, replace=False)
    return pairs_from_records([recs[i] for i in idx], cameras)


def pair_distances(pairs: PairedRays):
    """Ray-to-ray minimum distance and closest-approach parameters for every pair."""
    return ray_min_distance_batch(pairs.target_origins, pairs.target_dirs, pairs.ref_origins, pairs.ref_dirs)


def filter_keep_mask(pairs: PairedRays, tau_ray: float) -> np.ndarray:
    if tau_ray <= 0:
        raise ValueError("tau_ray must be positive")
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    dist, m, n, deg = pair_distances(pairs)
    return (dist <= tau_ray) & ~deg & ~((m < 0) & (n < 0))


def filter_pairs(pairs: PairedRays, tau_ray: float) -> PairedRays:
    """Keep pairs whose rays pass within ``tau_ray`` of each other, in input order.

    Parallel pairs and pairs whose closest approach lies behind both cameras are dropped.
    """
    return pairs.subset(filter_keep_mask(pairs, tau_ray))


def prefilter_stacks(stacks: list, cameras: dict, tau_ray: float) -> list:
    """Offline variant of :func:`filter_pairs` applied to whole stacks once."""
    out = []
    for st in stacks:
        recs = list(st.records.items())
        keep = filter_keep_mask(pairs_from_records([r for _, r in recs], cameras), tau_ray)
        new = MatchStack(st.target_image, {k: r for (k, r), ok in zip(recs, keep) if ok})
        new.outliers = {k for k in st.outliers if k in new.records}
        out.append(new)
    return out
