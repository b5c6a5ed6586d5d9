"""On-disk formats: PNG images, headered depth dumps and scene directories."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scenes import OracleView, Scene

DEPTH_MAGIC = b"DPTH"
_HEADER = struct.Struct("<4sII")  # magic, width, height


def save_png(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), "RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth(path, depth) -> None:
    """Little-endian header (b"DPTH", width, height) followed by row-major float32 depths."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DEPTH_MAGIC, w, h))
        fh.write(np.ascontiguousarray(d).tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated depth file")
    magic, w, h = _HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth dump")
    body = raw[_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {w}x{h} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


# scene directories ------------------------------------------------------------

SCENE_FILE = "scene.json"
ORACLE_FILE = "oracle.npz"


def save_scene_dir(out_dir, scene: Scene, views: dict) -> Path:
    """Scene config, full-precision oracle arrays and per-view PNG / depth files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / SCENE_FILE)
    arrays = {}
    for i, v in sorted(views.items()):
        arrays[f"image_{i}"] = v.image
        arrays[f"depth_{i}"] = v.depth
        save_png(out / f"view_{i:02d}.png", v.image)
        save_depth(out / f"depth_{i:02d}.bin", v.depth)
    np.savez(out / ORACLE_FILE, **arrays)
    return out


def load_scene_dir(path) -> tuple[Scene, dict]:
    """Inverse of :func:`save_scene_dir`: (scene, {view index: OracleView})."""
    root = Path(path)
    if not (root / SCENE_FILE).is_file():
        raise FileNotFoundError(f"{root} holds no {SCENE_FILE}")
    scene = Scene.load(root / SCENE_FILE)
    views = {}
    with np.load(root / ORACLE_FILE) as z:
        for key in z.files:
            if key.startswith("image_"):
                i = int(key[len("image_"):])
                views[i] = OracleView(z[key], z[f"depth_{i}"], i)
    return scene, views
