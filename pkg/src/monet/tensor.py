"""Dense-tensor kernels shared by every other module.

Tensors are plain numpy ndarrays: row-major, float64 by default (a float32
mode for faster training is opt-in at the call site, never the default).
Each kernel accepts three carriers and picks the right path:

  * numeric ndarrays       -> numpy implementation, op-ledger recording
  * object-dtype ndarrays  -> exact arithmetic (Fraction / polynomial
                              elements), used by the symbolic degree oracle
  * autodiff variables     -> delegated to the recorded-op table that
                              `monet.autodiff` registers at import time

Composite kernels (conv2d, global_avgpool) are built from the dispatching
primitives, so they work on all carriers and their ledger cost is the sum of
their parts.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from . import ledger
from .errors import (
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    UnsupportedConfigError,
)

# -- carrier dispatch -------------------------------------------------------

_VAR_TYPES: tuple = ()
_VAR_OPS = None


def _register_autodiff(var_type, ops_module) -> None:
    """Called by monet.autodiff on import; wires Variables into the kernels."""
    global _VAR_TYPES, _VAR_OPS
    _VAR_TYPES = (var_type,)
    _VAR_OPS = ops_module


def _isvar(x) -> bool:
    return bool(_VAR_TYPES) and isinstance(x, _VAR_TYPES)


def _is_exact(x) -> bool:
    return isinstance(x, np.ndarray) and x.dtype == object


def shape_of(x) -> tuple[int, ...]:
    return tuple(x.shape)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


# -- primitive kernels ------------------------------------------------------


def matmul(a, b):
    """Matrix product of a (p, q) by b (q, r); ledger cost p*q*r MACs."""
    if _isvar(a) or _isvar(b):
        return _VAR_OPS.matmul(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if _is_exact(a) or _is_exact(b):
        return np.dot(a, b)
    p, q = a.shape
    r = b.shape[1]
    ledger.record("mac", p * q * r)
    return a @ b


def hadamard(a, b):
    """Elementwise product of same-shape tensors; one FLOP per element."""
    if _isvar(a) or _isvar(b):
        return _VAR_OPS.hadamard(a, b)
    if shape_of(a) != shape_of(b):
        raise DimensionError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    if not (_is_exact(a) or _is_exact(b)):
        ledger.record("mul", a.size)
    return a * b


def add(a, b):
    """Elementwise (broadcasting) add; zero FLOP weight, counted in census."""
    if _isvar(a) or _isvar(b):
        return _VAR_OPS.add(a, b)
    try:
        out_shape = np.broadcast_shapes(shape_of(a), shape_of(b))
    except ValueError as e:
        raise DimensionError(str(e)) from e
    if not (_is_exact(a) or _is_exact(b)):
        ledger.record("add", int(np.prod(out_shape, dtype=np.int64)))
    return a + b


def scale(a, c):
    """Multiply a tensor by a python scalar."""
    if _isvar(a):
        return _VAR_OPS.scale(a, c)
    if not _is_exact(a):
        ledger.record("mul", a.size)
    return a * c


def reshape(a, shape):
    if _isvar(a):
        return _VAR_OPS.reshape(a, shape)
    return np.reshape(a, shape)


def transpose(a, axes):
    if _isvar(a):
        return _VAR_OPS.transpose(a, axes)
    return np.transpose(a, axes)


def sum_axis(a, axis: int):
    """Sum over one axis; (n-1) adds per output element."""
    if _isvar(a):
        return _VAR_OPS.sum_axis(a, axis)
    n = a.shape[axis]
    if not _is_exact(a):
        ledger.record("add", max(n - 1, 0) * (a.size // max(n, 1)))
    return a.sum(axis=axis)


def shift_grid(x):
    """Spatial shift on a (batch, height, width, channels) grid.

    Channels split into four equal groups, each translated one token along
    +width, -width, +height, -height respectively. The vacated border line
    keeps its pre-shift values; the line pushed off the far edge is dropped.
    Pure data movement: no arithmetic is recorded.
    """
    if _isvar(x):
        return _VAR_OPS.shift_grid(x)
    if x.ndim != 4:
        raise DimensionError(f"shift expects a 4-D grid, got shape {x.shape}")
    c = x.shape[3]
    if c % 4 != 0:
        from .errors import ConfigError

        raise ConfigError(f"spatial shift needs channels divisible by 4, got {c}")
    g = c // 4
    out = x.copy()
    out[:, :, 1:, 0:g] = x[:, :, :-1, 0:g]
    out[:, :, :-1, g : 2 * g] = x[:, :, 1:, g : 2 * g]
    out[:, 1:, :, 2 * g : 3 * g] = x[:, :-1, :, 2 * g : 3 * g]
    out[:, :-1, :, 3 * g :] = x[:, 1:, :, 3 * g :]
    return out


def shift_grid_backward(g_out: np.ndarray) -> np.ndarray:
    """Adjoint of shift_grid (scatter-add of the four group translations)."""
    c = g_out.shape[3]
    g = c // 4
    gin = np.zeros_like(g_out)
    gin[:, :, :-1, 0:g] += g_out[:, :, 1:, 0:g]
    gin[:, :, 0:1, 0:g] += g_out[:, :, 0:1, 0:g]
    gin[:, :, 1:, g : 2 * g] += g_out[:, :, :-1, g : 2 * g]
    gin[:, :, -1:, g : 2 * g] += g_out[:, :, -1:, g : 2 * g]
    gin[:, :-1, :, 2 * g : 3 * g] += g_out[:, 1:, :, 2 * g : 3 * g]
    gin[:, 0:1, :, 2 * g : 3 * g] += g_out[:, 0:1, :, 2 * g : 3 * g]
    gin[:, 1:, :, 3 * g :] += g_out[:, :-1, :, 3 * g :]
    gin[:, -1:, :, 3 * g :] += g_out[:, -1:, :, 3 * g :]
    return gin


def layernorm(x, gamma, beta, eps: float = 1e-6):
    """Per-token normalization over the channel (last) axis.

    out = (x - mean) / sqrt(var + eps) * gamma + beta. The only kernel with
    divisions and square roots; its census entries are flagged
    non-multilinear (one div and one sqrt per token).
    """
    if _isvar(x) or _isvar(gamma) or _isvar(beta):
        return _VAR_OPS.layernorm(x, gamma, beta, eps)
    if _is_exact(x):
        raise UnsupportedConfigError("layernorm is not defined for symbolic tensors")
    c = x.shape[-1]
    if c == 0:
        raise DimensionError("layernorm needs a nonempty channel axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layernorm gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}"
        )
    if eps <= 0:
        raise InputError("layernorm eps must be positive")
    tokens = x.size // c
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv * gamma + beta
    ledger.record("sqrt", tokens, multilinear=False)
    ledger.record("div", tokens, multilinear=False)
    ledger.record("add", tokens * (3 * c + 1), multilinear=False)
    ledger.record("mul", tokens * (3 * c + 2), multilinear=False)
    return out


def layernorm_backward(g_out, x, gamma, eps):
    """Analytic layernorm gradients: returns (dx, dgamma, dbeta)."""
    c = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gy = g_out * gamma
    # reduce every axis except the channel one
    red = tuple(range(x.ndim - 1))
    dgamma = (g_out * xhat).sum(axis=red)
    dbeta = g_out.sum(axis=red)
    m1 = gy.mean(axis=-1, keepdims=True)
    m2 = (gy * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (gy - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _patchify(x, kh: int, kw: int):
    """Split a (B, H, W, C) tensor into non-overlapping kh x kw patches.

    Returns (patches, out_h, out_w) with patches shaped
    (B*out_h*out_w, kh*kw*C).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv input must be 4-D (B,H,W,C), got {x.shape}")
    b, h, w, c = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if h % kh != 0 or w % kw != 0:
        raise DimensionError(f"kernel {kh}x{kw} does not tile input {h}x{w}")
    oh, ow = h // kh, w // kw
    t = reshape(x, (b, oh, kh, ow, kw, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b * oh * ow, kh * kw * c)), oh, ow


def conv2d(x, kernel: np.ndarray, bias: np.ndarray, stride: int):
    """Non-overlapping convolution (stride must equal the kernel size).

    x: (B, H, W, Cin); kernel: (kh, kw, Cin, Cout); bias: (Cout,).
    Returns (B, H/kh, W/kw, Cout). Cost lands in the ledger through the
    internal matmul: out_positions * kernel_volume * out_channels MACs.
    """
    kh, kw, cin, cout = kernel.shape
    if stride != kh or kh != kw:
        raise DimensionError(
            f"only stride == kernel size supported, got kernel {kh}x{kw} stride {stride}"
        )
    if x.shape[3] != cin:
        raise DimensionError(f"conv expects {cin} input channels, got {x.shape[3]}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv bias must have shape ({cout},), got {bias.shape}")
    b = x.shape[0]
    patches, oh, ow = _patchify(x, kh, kw)
    wmat = kernel.reshape(kh * kw * cin, cout)
    out = add(matmul(patches, wmat), bias)
    return reshape(out, (b, oh, ow, cout))


def global_avgpool(x):
    """Mean over all token positions of a (B, H, W, C) grid -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool expects a 4-D grid, got {x.shape}")
    b, h, w, c = x.shape
    if h * w == 0:
        raise DimensionError("avgpool needs a nonempty grid")
    flat = reshape(x, (b, h * w, c))
    total = sum_axis(flat, 1)
    if _is_exact(x):
        from fractions import Fraction

        return total * Fraction(1, h * w)
    return scale(total, 1.0 / (h * w))


def cross_entropy_label_smoothed(logits, targets: np.ndarray, smoothing: float):
    """Mean softmax cross-entropy against a label-smoothed one-hot target.

    Target distribution puts 1 - smoothing on the true class and
    smoothing / (k - 1) on each other class. Returns a scalar.
    """
    if _isvar(logits):
        return _VAR_OPS.cross_entropy_label_smoothed(logits, targets, smoothing)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    if not 0.0 <= smoothing < 1.0:
        raise InputError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise DimensionError(f"targets must be ({b},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise InputError("class index out of range")
    logz, _ = _log_softmax(logits)
    q = _smoothed_targets(targets, k, smoothing, logits.dtype)
    loss = -(q * logz).sum() / b
    ledger.record("other", 2 * b * k, multilinear=False)  # exp/log
    ledger.record("cmp", b * k, multilinear=False)  # max-shift
    ledger.record("div", b, multilinear=False)
    ledger.record("add", 3 * b * k, multilinear=False)
    ledger.record("mul", b * k, multilinear=False)
    return float(loss)


def _log_softmax(logits: np.ndarray):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z - lse, np.exp(z - lse)


def _smoothed_targets(targets, k, smoothing, dtype):
    b = targets.shape[0]
    off = smoothing / (k - 1) if k > 1 else 0.0
    q = np.full((b, k), off, dtype=dtype)
    q[np.arange(b), targets] = 1.0 - smoothing
    return q


def cross_entropy_backward(logits, targets, smoothing):
    """d(mean CE)/dlogits = (softmax - smoothed_onehot) / batch."""
    b, k = logits.shape
    _, p = _log_softmax(logits)
    q = _smoothed_targets(targets, k, smoothing, logits.dtype)
    return (p - q) / b


# -- serialization ----------------------------------------------------------

MAGIC = b"MONETTEN"


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Binary tensor blob: magic, u32 rank, u64 extents, f64 payload (all LE)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<Q", extent))
    f.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated tensor blob while reading {what}")
    return data


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = tuple(
        struct.unpack("<Q", _read_exact(f, 8, "extent"))[0] for _ in range(rank)
    )
    count = 1
    for extent in shape:
        count *= extent
    # bound the allocation against the real file size when we can
    try:
        import os

        remaining = os.fstat(f.fileno()).st_size - f.tell()
        if count * 8 > remaining:
            raise FormatError(
                f"tensor payload of {count} elements exceeds remaining file size"
            )
    except (OSError, AttributeError):
        pass
    payload = _read_exact(f, count * 8, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
