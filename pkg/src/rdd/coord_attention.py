"""Coordinate attention block with an explicit forward and backward pass.

The block pools the input along width and along height, mixes the two
pooled descriptors through a shared pointwise convolution, then produces one
sigmoid gate per row and one per column. The output reweights every input
element by its row gate and its column gate:

    y[c, i, j] = x[c, i, j] * g_h[c, i] * g_w[c, j]

No normalization layer is used inside the block. Parameters can be written to
and read back from a small little-endian binary file (see :func:`save_params`).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numeric
from .numeric import ShapeError

DEFAULT_REDUCTION = 32
MAGIC = b"CAPM"
FORMAT_VERSION = 1
_KIND_CODES = {"hard_swish": 0, "sigmoid": 1}

_ARRAY_FIELDS = ("w_f1", "b_f1", "w_fh", "b_fh", "w_fw", "b_fw")


def mid_channels(c_in: int, reduction: int) -> int:
    return max(1, c_in // reduction)


@dataclass(frozen=True)
class CAParams:
    c_in: int
    reduction: int
    w_f1: np.ndarray  # (c_mid, C)
    b_f1: np.ndarray
    w_fh: np.ndarray  # (C, c_mid)
    b_fh: np.ndarray
    w_fw: np.ndarray  # (C, c_mid)
    b_fw: np.ndarray
    delta_kind: str = "hard_swish"

    def __post_init__(self):
        if self.c_in < 1 or self.reduction < 1:
            raise ValueError("c_in and reduction must be >= 1")
        if self.delta_kind not in _KIND_CODES:
            raise ValueError(f"unknown delta_kind {self.delta_kind!r}")
        m, c = self.c_mid, self.c_in
        expected = {
            "w_f1": (m, c), "b_f1": (m,),
            "w_fh": (c, m), "b_fh": (c,),
            "w_fw": (c, m), "b_fw": (c,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def c_mid(self) -> int:
        return mid_channels(self.c_in, self.reduction)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in _ARRAY_FIELDS]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec) -> "CAParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {vec.size}")
        out, pos = {}, 0
        for name, arr in zip(_ARRAY_FIELDS, self.arrays()):
            out[name] = vec[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return replace(self, **out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, CAParams):
            return NotImplemented
        return (
            (self.c_in, self.reduction, self.delta_kind) == (other.c_in, other.reduction, other.delta_kind)
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )

    __hash__ = None


@dataclass(frozen=True)
class CAOutput:
    y: np.ndarray    # (C, H, W)
    g_h: np.ndarray  # (C, H)
    g_w: np.ndarray  # (C, W)
    f: np.ndarray    # (c_mid, H + W)


def init_params(
    c_in: int,
    reduction: int = DEFAULT_REDUCTION,
    seed: int = 0,
    delta_kind: str = "hard_swish",
) -> CAParams:
    """Uniform(-k, k) weights with k = sqrt(1 / fan_in); zero biases."""
    if c_in < 1 or reduction < 1:
        raise ValueError("c_in and reduction must be >= 1")
    rng = np.random.default_rng(seed)
    m = mid_channels(c_in, reduction)

    def uniform(rows, cols):
        k = np.sqrt(1.0 / cols)
        return rng.uniform(-k, k, size=(rows, cols))

    return CAParams(
        c_in=c_in,
        reduction=reduction,
        w_f1=uniform(m, c_in), b_f1=np.zeros(m),
        w_fh=uniform(c_in, m), b_fh=np.zeros(c_in),
        w_fw=uniform(c_in, m), b_fw=np.zeros(c_in),
        delta_kind=delta_kind,
    )


def _check_input(x, p: CAParams) -> np.ndarray:
    x = numeric.as_tensor(x)
    if x.shape[0] != p.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, block expects {p.c_in}")
    return x


def _forward_cache(x: np.ndarray, p: CAParams) -> dict:
    _, h, w = x.shape
    z = np.concatenate([numeric.pool_mean_width(x), numeric.pool_mean_height(x)], axis=1)
    a = numeric.conv1x1(p.w_f1, z, p.b_f1)
    f = numeric.activation(a, p.delta_kind)
    f_h, f_w = f[:, :h], f[:, h:]
    g_h = numeric.sigmoid(numeric.conv1x1(p.w_fh, f_h, p.b_fh))
    g_w = numeric.sigmoid(numeric.conv1x1(p.w_fw, f_w, p.b_fw))
    y = x * g_h[:, :, None] * g_w[:, None, :]
    return {"z": z, "a": a, "f": f, "f_h": f_h, "f_w": f_w, "g_h": g_h, "g_w": g_w, "y": y}


def forward(x, p: CAParams) -> CAOutput:
    x = _check_input(x, p)
    c = _forward_cache(x, p)
    return CAOutput(y=c["y"], g_h=c["g_h"], g_w=c["g_w"], f=c["f"])


def backward(x, p: CAParams, upstream) -> tuple[np.ndarray, CAParams]:
    """Gradients of ``sum(upstream * forward(x, p).y)``.

    Returns ``(grad_x, grad_params)`` where ``grad_params`` is a
    :class:`CAParams` holding gradients in place of weights.
    """
    x = _check_input(x, p)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {x.shape}")
    _, h, w = x.shape
    c = _forward_cache(x, p)
    g_h, g_w = c["g_h"], c["g_w"]

    grad_x = upstream * g_h[:, :, None] * g_w[:, None, :]
    ux = upstream * x
    d_gh = (ux * g_w[:, None, :]).sum(axis=2)
    d_gw = (ux * g_h[:, :, None]).sum(axis=1)

    d_ah = d_gh * g_h * (1.0 - g_h)
    d_aw = d_gw * g_w * (1.0 - g_w)
    dw_fh, d_fh, db_fh = numeric.conv1x1_backward(d_ah, p.w_fh, c["f_h"])
    dw_fw, d_fw, db_fw = numeric.conv1x1_backward(d_aw, p.w_fw, c["f_w"])

    d_a = np.concatenate([d_fh, d_fw], axis=1) * numeric.activation_grad(c["a"], p.delta_kind)
    dw_f1, d_z, db_f1 = numeric.conv1x1_backward(d_a, p.w_f1, c["z"])

    grad_x = grad_x + numeric.pool_mean_width_backward(d_z[:, :h], w)
    grad_x = grad_x + numeric.pool_mean_height_backward(d_z[:, h:], h)

    grads = replace(p, w_f1=dw_f1, b_f1=db_f1, w_fh=dw_fh, b_fh=db_fh, w_fw=dw_fw, b_fw=db_fw)
    return grad_x, grads


def attention_maps(out: CAOutput) -> tuple[np.ndarray, np.ndarray]:
    return out.g_h, out.g_w


def save_params(p: CAParams, path) -> None:
    """Write ``p`` as: b"CAPM", then u32 version, C, r, activation code,
    then w_f1, b_f1, w_fh, b_fh, w_fw, b_fw as little-endian float64."""
    header = MAGIC + struct.pack("<4I", FORMAT_VERSION, p.c_in, p.reduction, _KIND_CODES[p.delta_kind])
    body = b"".join(a.astype("<f8").tobytes() for a in p.arrays())
    Path(path).write_bytes(header + body)


def load_params(path) -> CAParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a coordinate-attention parameter file")
    version, c_in, reduction, code = struct.unpack_from("<4I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise ValueError(f"{path}: unknown activation code {code}")
    template = init_params(c_in, reduction, seed=0, delta_kind=kinds[code])
    values = np.frombuffer(raw, dtype="<f8", offset=20)
    if values.size != template.size:
        raise ValueError(f"{path}: expected {template.size} values, found {values.size}")
    return template.from_vector(values)


def self_check(seed: int = 0, n_instances: int = 5, eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Shape and gradient checks on seeded random instances.

    The scalar loss is ``sum(y**2)``; gradients with respect to the input and
    every parameter are compared with central differences.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    shapes_ok = True
    for _ in range(n_instances):
        c, h, w = (int(v) for v in rng.integers(1, 6, size=3))
        r = int(rng.integers(1, 4))
        p = init_params(c, r, seed=int(rng.integers(2**31)), delta_kind="hard_swish")
        # nonzero biases so every parameter gradient is exercised
        p = p.from_vector(p.to_vector() + rng.normal(scale=0.3, size=p.size))
        x = rng.normal(size=(c, h, w))
        shapes_ok &= forward(x, p).y.shape == x.shape

        def loss_x(v):
            return float(np.sum(forward(v.reshape(x.shape), p).y ** 2))

        def grad_x(v):
            xx = v.reshape(x.shape)
            return backward(xx, p, 2.0 * forward(xx, p).y)[0].ravel()

        def loss_p(v):
            return float(np.sum(forward(x, p.from_vector(v)).y ** 2))

        def grad_p(v):
            pp = p.from_vector(v)
            return backward(x, pp, 2.0 * forward(x, pp).y)[1].to_vector()

        for report in (
            numeric.grad_check(loss_x, grad_x, x.ravel(), eps=eps, tol=tol),
            numeric.grad_check(loss_p, grad_p, p.to_vector(), eps=eps, tol=tol),
        ):
            worst = max(worst, report.max_rel_err)
    return {
        "pass": bool(shapes_ok and worst <= tol),
        "shapes_ok": bool(shapes_ok),
        "max_rel_err": worst,
        "n_instances": n_instances,
        "seed": seed,
        "tol": tol,
        "eps": eps,
    }


__all__ = [
    "CAParams", "CAOutput", "init_params", "forward", "backward", "attention_maps",
    "save_params", "load_params", "self_check", "mid_channels", "DEFAULT_REDUCTION",
]
