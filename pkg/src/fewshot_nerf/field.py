"""Positional encoding, coarse-to-fine frequency masking and the MLP radiance field."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import GraphStateError, Tensor, linear


class FieldNumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 10
    L_dir: int = 4
    include_identity: bool = True
    # "band": one mask value per frequency band; "entry": one per flattened sin/cos entry
    mask_mode: str = "band"

    def __post_init__(self):
        if self.L_pos < 1 or self.L_dir < 0:
            raise ValueError("need L_pos >= 1 and L_dir >= 0")
        if self.mask_mode not in ("band", "entry"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    @property
    def pos_dim(self) -> int:
        return 3 * self.include_identity + 6 * self.L_pos

    @property
    def dir_dim(self) -> int:
        return 3 * self.include_identity + 6 * self.L_dir


@dataclass(frozen=True)
class FieldConfig:
    encoding: EncodingConfig = EncodingConfig()
    hidden_width: int = 64
    hidden_layers: int = 4
    skip_layer: int = 2
    color_width: int = 32
    seed: int = 0
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["encoding"] = EncodingConfig(**d.get("encoding", {}))
        return cls(**d)


def positional_encoding(x, L: int, include_identity: bool = False) -> np.ndarray:
    """Sinusoidal encoding of points (..., 3), band-major.

    Band k contributes ``sin(2^k x), sin(2^k y), sin(2^k z), cos(2^k x), cos(2^k y), cos(2^k z)``.
    The raw coordinates are prepended when ``include_identity`` is set.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    lead = x.shape[:-1]
    off = 3 if include_identity else 0
    out = np.empty((*lead, off + 6 * L), dtype=x.dtype)
    if include_identity:
        out[..., :3] = x
    if L > 0:
        freqs = (2.0 ** np.arange(L)).astype(x.dtype)
        scaled = x[..., None, :] * freqs[:, None]  # (..., L, 3)
        bands = out[..., off:].reshape(*lead, L, 2, 3)
        np.sin(scaled, out=bands[..., 0, :])
        np.cos(scaled, out=bands[..., 1, :])
    return out


def frequency_mask(t: int, T: int, L: int) -> np.ndarray:
    """Visibility weight of each of ``L`` frequency bands at step ``t`` of ``T``.

    With s = t*L/T: band i (1-based) is fully on for i <= s + 3, takes the
    fractional part of s for s + 3 < i <= s + 6 and is off above that.
    Integer arithmetic keeps the band thresholds exact.
    """
    if T < 1 or not (0 <= t <= T):
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={T}")
    num = t * L
    frac = (num % T) / T
    out = np.zeros(L)
    for i in range(1, L + 1):
        if (i - 3) * T <= num:
            out[i - 1] = 1.0
        elif (i - 6) * T <= num:
            out[i - 1] = frac
    return np.clip(out, 0.0, 1.0)


def encoding_mask(t: int, T: int, cfg: EncodingConfig) -> np.ndarray:
    """Per-entry multiplier for the (identity-free) position encoding, length 6*L_pos."""
    if cfg.mask_mode == "band":
        return np.repeat(frequency_mask(t, T, cfg.L_pos), 6)
    return frequency_mask(t, T, 6 * cfg.L_pos)


def masked_encoding(x, t: int, T: int, cfg: EncodingConfig, *, mask: np.ndarray | None = None) -> np.ndarray:
    """Position encoding with the high bands faded in over training; identity channels unmasked."""
    x = np.asarray(x)
    enc = positional_encoding(x, cfg.L_pos, include_identity=cfg.include_identity)
    m = encoding_mask(t, T, cfg) if mask is None else mask
    off = 3 if cfg.include_identity else 0
    enc[..., off:] *= m.astype(enc.dtype)
    return enc


@dataclass
class FieldOutput:
    sigma: float
    color: np.ndarray


class FieldParams:
    """Named MLP weights; each is a leaf ``Tensor`` whose ``.grad`` is the accumulator."""

    def __init__(self, config: FieldConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    # construction ---------------------------------------------------------

    @classmethod
    def init(cls, config: FieldConfig = FieldConfig()) -> "FieldParams":
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        enc = config.encoding
        W = config.hidden_width
        # (name, fan_in, fan_out, has_bias); split weights stand in for concatenated inputs
        shapes = []
        for i in range(config.hidden_layers):
            shapes.append((f"trunk{i}.w", enc.pos_dim if i == 0 else W, W, True))
            if i == config.skip_layer and i > 0:
                shapes.append((f"trunk{i}.w_skip", enc.pos_dim, W, False))
        shapes.append(("sigma.w", W, 1, True))
        shapes.append(("color0.w", W, config.color_width, True))
        shapes.append(("color0.w_dir", enc.dir_dim, config.color_width, False))
        shapes.append(("color1.w", config.color_width, 3, True))
        tensors = OrderedDict()
        for name, fan_in, fan_out, has_bias in shapes:
            # He-uniform on the full (concatenated) fan-in of the layer
            full_in = fan_in
            if name.endswith(".w_skip"):
                full_in += W
            elif name.startswith("trunk") and name.replace(".w", ".w_skip") in [s[0] for s in shapes]:
                full_in += enc.pos_dim
            elif name == "color0.w_dir":
                full_in += W
            elif name == "color0.w":
                full_in += enc.dir_dim
            bound = np.sqrt(6.0 / full_in)
            tensors[name] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), True)
            if has_bias:
                tensors[name[:-2] + ".b"] = Tensor(np.zeros(fan_out, dtype=dtype), True)
        return cls(config, tensors)

    # accumulators ---------------------------------------------------------

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> list[np.ndarray]:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors.values()]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors.values()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "FieldParams":
        return FieldParams(
            self.config, OrderedDict((k, Tensor(v.data.copy(), True)) for k, v in self.tensors.items())
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def check_finite(self):
        bad = [k for k, t in self.tensors.items() if not np.all(np.isfinite(t.data))]
        if bad:
            raise FieldNumericalError(f"non-finite parameters: {bad}")


def _dense(params: FieldParams, name: str, x) -> Tensor:
    return linear(x, params.tensors[f"{name}.w"], params.tensors.get(f"{name}.b"))


def field_forward(
    params: FieldParams,
    x,
    d,
    t: int,
    T: int,
    *,
    freq_reg: bool = True,
) -> tuple[Tensor, Tensor]:
    """Evaluate the field at points ``x`` viewed along unit directions ``d``.

    ``x`` is (M, 3) with ``d`` (M, 3), or (R, N, 3) with one direction per ray
    ``d`` (R, 3). Returns graph-recording tensors sigma and color with the
    leading shape of ``x``.
    """
    cfg = params.config
    dtype = np.dtype(cfg.dtype)
    x = np.asarray(x).astype(dtype, copy=False)
    d = np.asarray(d).astype(dtype, copy=False)
    lead = x.shape[:-1]
    if x.ndim == 2:
        x = x[:, None, :]
    R, N = x.shape[:2]
    if d.shape != (R, 3):
        raise ValueError(f"directions {d.shape} do not match points {x.shape}")
    enc_cfg = cfg.encoding
    flat = x.reshape(-1, 3)
    if freq_reg:
        pos = masked_encoding(flat, min(t, T), T, enc_cfg)
    else:
        pos = positional_encoding(flat, enc_cfg.L_pos, enc_cfg.include_identity)
    dirs = positional_encoding(d, enc_cfg.L_dir, enc_cfg.include_identity)

    p = params.tensors
    h = pos
    for i in range(cfg.hidden_layers):
        z = _dense(params, f"trunk{i}", h)
        if f"trunk{i}.w_skip" in p:
            z = z + linear(pos, p[f"trunk{i}.w_skip"])
        h = z.relu()
    sigma = _dense(params, "sigma", h).softplus().reshape(*lead)
    view = linear(dirs, p["color0.w_dir"]).reshape(R, 1, cfg.color_width)
    c = (_dense(params, "color0", h).reshape(R, N, cfg.color_width) + view).relu()
    color = _dense(params, "color1", c).reshape(*lead, 3).sigmoid()
    if not (np.all(np.isfinite(sigma.data)) and np.all(np.isfinite(color.data))):
        stats = {k: float(np.max(np.abs(v.data))) for k, v in params.tensors.items()}
        raise FieldNumericalError(f"non-finite field output; max |param| per tensor: {stats}")
    return sigma, color


def field_eval(params: FieldParams, x, d, t: int, T: int, *, freq_reg: bool = True) -> FieldOutput:
    """Single-point convenience wrapper around :func:`field_forward`."""
    sigma, color = field_forward(params, np.reshape(x, (1, 3)), np.reshape(d, (1, 3)), t, T, freq_reg=freq_reg)
    return FieldOutput(float(sigma.data[0]), color.data[0].astype(np.float64))


def backward(loss) -> None:
    """Accumulate d(loss)/d(param) into every parameter's ``.grad``."""
    if not isinstance(loss, Tensor):
        raise GraphStateError("backward() needs the loss tensor produced by a forward pass")
    loss.backward()


# checkpoints ------------------------------------------------------------------


def save_checkpoint(path, params: FieldParams, extra: dict | None = None) -> None:
    """Write parameters (and optional extra arrays/metadata) to an ``.npz`` file.

    Arrays keep dtype and shape exactly, so a round trip is bit-exact.
    """
    payload = {f"param/{k}": t.data for k, t in params.tensors.items()}
    meta = {"field_config": params.config.to_dict(), "config_hash": params.config_hash()}
    for k, v in (extra or {}).items():
        if isinstance(v, np.ndarray):
            payload[f"extra/{k}"] = v
        else:
            meta[k] = v
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[FieldParams, dict, dict]:
    """Inverse of :func:`save_checkpoint`: returns (params, meta, extra_arrays)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        config = FieldConfig.from_dict(meta["field_config"])
        tensors = OrderedDict()
        extra = {}
        for key in z.files:
            if key.startswith("param/"):
                tensors[key[len("param/"):]] = Tensor(z[key].copy(), True)
            elif key.startswith("extra/"):
                extra[key[len("extra/"):]] = z[key].copy()
    params = FieldParams(config, tensors)
    if params.config_hash() != meta["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    return params, meta, extra
