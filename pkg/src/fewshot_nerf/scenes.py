"""Analytic scenes with ground-truth images and depth.

Each primitive is a signed distance function. Density is a soft indicator
``sigma_max * sigmoid(-sdf / softness)`` so that dense quadrature converges,
and color comes from a smooth procedural texture on the closest primitive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, CameraIntrinsics, CameraPose, generate_rays


@dataclass
class Texture:
    kind: str = "solid"  # solid | checker | stripes
    colors: tuple = ((0.8, 0.8, 0.8), (0.2, 0.2, 0.2))
    frequency: float = 6.0  # radians per scene unit
    sharpness: float = 3.0
    axes: tuple = (0, 1)
    phase: float = 0.0

    def mix(self, p: np.ndarray) -> np.ndarray:
        """Blend factor in [0, 1] at points (M, 3)."""
        if self.kind == "solid":
            return np.zeros(p.shape[0])
        w = self.frequency
        if self.kind == "checker":
            a, b = self.axes
            s = np.sin(w * p[:, a] + self.phase) * np.sin(w * p[:, b] + self.phase)
        elif self.kind == "stripes":
            s = np.sin(w * p[:, self.axes[0]] + self.phase)
        else:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        return 0.5 + 0.5 * np.tanh(self.sharpness * s)

    def color(self, p: np.ndarray) -> np.ndarray:
        c0 = np.asarray(self.colors[0], dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(c0, (p.shape[0], 3)).copy()
        c1 = np.asarray(self.colors[1], dtype=np.float64)
        s = self.mix(p)[:, None]
        return (1.0 - s) * c0 + s * c1


@dataclass
class Primitive:
    kind: str  # sphere | box | cylinder
    center: tuple
    size: tuple  # sphere: (r,), box: half extents (3,), cylinder: (radius, half_height)
    texture: Texture = field(default_factory=Texture)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size, dtype=np.float64)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(np.max(d, axis=-1), 0.0)
            return outside + inside
        if self.kind == "cylinder":
            radial = np.hypot(q[:, 0], q[:, 2]) - self.size[0]
            axial = np.abs(q[:, 1]) - self.size[1]
            d = np.stack([radial, axial], axis=-1)
            return np.linalg.norm(np.maximum(d, 0.0), axis=-1) + np.minimum(np.max(d, axis=-1), 0.0)
        raise ValueError(f"unknown primitive {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": list(map(float, self.center)),
            "size": list(map(float, self.size)),
            "texture": {
                "kind": self.texture.kind,
                "colors": [list(map(float, c)) for c in self.texture.colors],
                "frequency": self.texture.frequency,
                "sharpness": self.texture.sharpness,
                "axes": list(self.texture.axes),
                "phase": self.texture.phase,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        tex = d.get("texture", {})
        texture = Texture(
            kind=tex.get("kind", "solid"),
            colors=tuple(tuple(c) for c in tex.get("colors", Texture.colors)),
            frequency=tex.get("frequency", 6.0),
            sharpness=tex.get("sharpness", 3.0),
            axes=tuple(tex.get("axes", (0, 1))),
            phase=tex.get("phase", 0.0),
        )
        return cls(d["kind"], tuple(d["center"]), tuple(d["size"]), texture)


@dataclass
class Scene:
    name: str
    primitives: list
    cameras: list  # list[Camera]
    near: float
    far: float
    diameter: float
    train_views: list
    test_views: list
    sigma_max: float = 400.0
    softness: float = 0.01
    seed: int = 0

    # analytic fields ------------------------------------------------------

    def sdf(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Union SDF at points (M, 3) and the index of the closest primitive."""
        if not self.primitives:
            return np.full(p.shape[0], np.inf), np.zeros(p.shape[0], dtype=int)
        d = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        idx = np.argmin(d, axis=0)
        return np.take_along_axis(d, idx[None], axis=0)[0], idx

    def density(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        d, _ = self.sdf(p)
        z = np.clip(d / self.softness, -60.0, 60.0)
        return self.sigma_max / (1.0 + np.exp(z))

    def color(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((p.shape[0], 3))
        if not self.primitives:
            return out
        _, idx = self.sdf(p)
        for k, prim in enumerate(self.primitives):
            sel = idx == k
            if np.any(sel):
                out[sel] = prim.texture.color(p[sel])
        return out

    # serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "primitives": [p.to_dict() for p in self.primitives],
            "cameras": [camera_to_dict(c) for c in self.cameras],
            "near": self.near,
            "far": self.far,
            "diameter": self.diameter,
            "train_views": list(self.train_views),
            "test_views": list(self.test_views),
            "sigma_max": self.sigma_max,
            "softness": self.softness,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            name=d["name"],
            primitives=[Primitive.from_dict(p) for p in d["primitives"]],
            cameras=[camera_from_dict(c) for c in d["cameras"]],
            near=float(d["near"]),
            far=float(d["far"]),
            diameter=float(d["diameter"]),
            train_views=list(d["train_views"]),
            test_views=list(d["test_views"]),
            sigma_max=float(d.get("sigma_max", 400.0)),
            softness=float(d.get("softness", 0.01)),
            seed=int(d.get("seed", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def camera_to_dict(cam: Camera) -> dict:
    i = cam.intrinsics
    return {
        "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height,
        "rotation": cam.pose.rotation.tolist(),
        "translation": cam.pose.translation.tolist(),
    }


def camera_from_dict(d: dict) -> Camera:
    intr = CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))
    return Camera(intr, CameraPose(np.array(d["rotation"]), np.array(d["translation"])))


# oracle rendering -----------------------------------------------------------


@dataclass
class OracleView:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    camera_index: int


def oracle_render_rays(scene: Scene, origins, directions, n_quad: int = 1024, chunk: int = 256):
    """Dense midpoint quadrature of the volume-rendering integral on the analytic fields.

    Returns (rgb (R, 3), depth (R,)).
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    delta = (scene.far - scene.near) / n_quad
    t = scene.near + (np.arange(n_quad) + 0.5) * delta
    deltas = np.full(n_quad, delta)
    deltas[-1] = scene.far - t[-1]
    rgb = np.zeros((R, 3))
    depth = np.zeros(R)
    for s in range(0, R, chunk):
        o, d = origins[s:s + chunk], directions[s:s + chunk]
        pts = o[:, None, :] + t[None, :, None] * d[:, None, :]
        sigma = scene.density(pts.reshape(-1, 3)).reshape(len(o), n_quad)
        optical = np.minimum(sigma * deltas, 80.0)
        trans = np.exp(-(np.cumsum(optical, axis=-1) - optical))
        w = trans * (1.0 - np.exp(-optical))
        depth[s:s + chunk] = w @ t
        # colors only matter where the weight does
        live = w > 1e-12
        cols = np.zeros((*w.shape, 3))
        if np.any(live):
            cols[live] = scene.color(pts[live])
        rgb[s:s + chunk] = np.einsum("rn,rnc->rc", w, cols)
    return rgb, depth


def oracle_render(scene: Scene, camera: Camera | int, n_quad: int = 1024) -> OracleView:
    if n_quad < 512:
        raise ValueError("oracle quadrature needs n_quad >= 512")
    idx = camera if isinstance(camera, int) else -1
    cam = scene.cameras[camera] if isinstance(camera, int) else camera
    intr = cam.intrinsics
    vv, uu = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    o, d = generate_rays(intr, cam.pose, np.stack([uu.ravel(), vv.ravel()], axis=-1))
    rgb, depth = oracle_render_rays(scene, o, d, n_quad)
    return OracleView(
        np.clip(rgb, 0.0, 1.0).reshape(intr.height, intr.width, 3),
        depth.reshape(intr.height, intr.width),
        idx,
    )


# presets --------------------------------------------------------------------


def _intrinsics(size: int, fov_deg: float) -> CameraIntrinsics:
    f = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2)
    return CameraIntrinsics(f, f, size / 2, size / 2, size, size)


def two_spheres(size: int = 64) -> Scene:
    prims = [
        Primitive("sphere", (-0.55, 0.0, 0.0), (0.5,),
                  Texture("checker", ((0.9, 0.3, 0.2), (0.2, 0.3, 0.8)), 9.0, 3.0, (0, 1))),
        Primitive("sphere", (0.6, 0.1, 0.3), (0.4,), Texture("solid", ((0.3, 0.8, 0.4), (0.3, 0.8, 0.4)))),
    ]
    intr = _intrinsics(size, 40.0)
    cams = []
    for ang in np.deg2rad([-30, -15, 0, 15, 30]):
        eye = (4.0 * np.sin(ang), 0.6, -4.0 * np.cos(ang))
        cams.append(Camera(intr, CameraPose.look_at(eye, (0.0, 0.0, 0.0))))
    return Scene("two-spheres", prims, cams, 2.0, 6.5, 2.4, [0, 2, 4], [1, 3])


def boxes_grid(size: int = 64) -> Scene:
    prims = []
    palette = [(0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.2, 0.3, 0.9), (0.9, 0.8, 0.2), (0.8, 0.3, 0.8)]
    k = 0
    for gx in (-1, 0, 1):
        for gy in (-1, 0, 1):
            c0 = palette[k % len(palette)]
            c1 = palette[(k + 2) % len(palette)]
            center = (0.75 * gx, 0.75 * gy, 0.25 * ((gx + gy) % 3))
            prims.append(Primitive("box", center, (0.25, 0.25, 0.25),
                                   Texture("checker", (c0, c1), 14.0, 3.0, (0, 1), 0.3 * k)))
            k += 1
    intr = _intrinsics(size, 45.0)
    cams = []
    for ang in np.deg2rad([-36, -18, 0, 18, 36]):
        eye = (4.0 * np.sin(ang), 0.8 * np.cos(2 * ang), -4.0 * np.cos(ang))
        cams.append(Camera(intr, CameraPose.look_at(eye, (0.0, 0.0, 0.2))))
    return Scene("boxes-grid", prims, cams, 2.0, 6.5, 2.6, [0, 2, 4], [1, 3])


def wall_and_post(size: int = 64) -> Scene:
    prims = [
        Primitive("box", (0.0, 0.0, 4.2), (3.0, 3.0, 0.2),
                  Texture("checker", ((0.85, 0.8, 0.6), (0.25, 0.3, 0.45)), 5.0, 2.5, (0, 1))),
        Primitive("cylinder", (0.35, 0.0, 2.6), (0.35, 3.0),
                  Texture("stripes", ((0.9, 0.35, 0.15), (0.15, 0.2, 0.1)), 10.0, 2.5, (1,))),
        Primitive("box", (-0.8, 0.55, 3.1), (0.3, 0.3, 0.3),
                  Texture("checker", ((0.2, 0.7, 0.8), (0.95, 0.95, 0.9)), 12.0, 3.0, (0, 1), 0.5)),
    ]
    intr = _intrinsics(size, 50.0)
    cams = []
    for k, x in enumerate([-0.5, -0.25, 0.0, 0.25, 0.5]):
        y = 0.12 * (-1) ** k
        cams.append(Camera(intr, CameraPose.look_at((x, y, 0.0), (0.0, 0.0, 4.0))))
    return Scene("wall-and-post", prims, cams, 1.0, 5.5, 4.0, [0, 2, 4], [1, 3])


PRESETS = {"two-spheres": two_spheres, "boxes-grid": boxes_grid, "wall-and-post": wall_and_post}


def make_scene(preset: str, size: int = 64) -> Scene:
    try:
        return PRESETS[preset](size)
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
