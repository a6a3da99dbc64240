"""Dense float64 layer primitives with hand-written gradient rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Volumes and
feature maps use channel-first layout ``(C, D, H, W)``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Upper bound on im2col patch-matrix entries built at once (~64 MB of float64).
PATCH_BUDGET = 8_000_000


class ShapeError(ValueError):
    pass


@dataclass
class LayerGrad:
    wrt_input: np.ndarray | None
    wrt_weights: np.ndarray | None = None
    wrt_bias: np.ndarray | None = None


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _conv_geometry(in_shape, kshape, stride, padding):
    _, d, h, w = in_shape
    kd, kh, kw = kshape
    if padding == "same":
        pads = [_same_pads(n, k, stride) for n, k in zip((d, h, w), (kd, kh, kw))]
    elif padding == "valid":
        pads = [(0, 0)] * 3
    else:
        raise ValueError(f"unknown padding {padding!r}")
    padded = [n + a + b for n, (a, b) in zip((d, h, w), pads)]
    for n, k in zip(padded, (kd, kh, kw)):
        if k > n:
            raise ShapeError(f"kernel {tuple(kshape)} larger than padded input {tuple(padded)}")
    out = tuple((n - k) // stride + 1 for n, k in zip(padded, (kd, kh, kw)))
    return pads, out


def _check_conv(x, kernel, bias, stride):
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, D, H, W), got {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be (C_out, C_in, kd, kh, kw), got {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(
            f"kernel expects C_in={kernel.shape[1]} but input has {x.shape[0]} channels "
            f"(input {x.shape}, kernel {kernel.shape})")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={kernel.shape[0]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def _slabs(out_d: int, row_cost: int):
    step = max(1, PATCH_BUDGET // max(row_cost, 1))
    for start in range(0, out_d, step):
        yield start, min(out_d, start + step)


def _patches(windows, lo, hi):
    # windows: (C_in, D', H', W', kd, kh, kw) view -> (C_in*kd*kh*kw, rows*H'*W') copy
    blk = windows[:, lo:hi]
    c, n, h, w, kd, kh, kw = blk.shape
    return blk.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * kd * kh * kw, n * h * w)


def _windows(xp, kshape, stride):
    win = sliding_window_view(xp, kshape, axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def conv3d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """3D cross-correlation of a single ``(C_in, D, H, W)`` volume.

    ``same`` zero-pads each axis (floor before, ceil after) so that stride 1
    preserves the spatial shape; ``valid`` gives ``(n - k) // stride + 1``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    _check_conv(x, kernel, bias, stride)
    cout = kernel.shape[0]
    kshape = kernel.shape[2:]
    pads, (od, oh, ow) = _conv_geometry(x.shape, kshape, stride, padding)
    if kshape == (1, 1, 1) and stride == 1:
        out = (kernel.reshape(cout, -1) @ x.reshape(x.shape[0], -1)).reshape(cout, od, oh, ow)
        if bias is not None:
            out += bias[:, None, None, None]
        return out
    xp = np.pad(x, [(0, 0)] + pads) if any(p != (0, 0) for p in pads) else x
    win = _windows(xp, kshape, stride)
    w2 = kernel.reshape(cout, -1)
    out = np.empty((cout, od, oh * ow))
    for lo, hi in _slabs(od, w2.shape[1] * oh * ow):
        out[:, lo:hi] = (w2 @ _patches(win, lo, hi)).reshape(cout, hi - lo, oh * ow)
    out = out.reshape(cout, od, oh, ow)
    if bias is not None:
        out += bias[:, None, None, None]
    return out


def conv3d_grad(x, kernel, bias, upstream, stride: int = 1, padding: str = "same",
                need_input: bool = True) -> LayerGrad:
    """Gradients of ``conv3d`` w.r.t. input, kernel and bias.

    ``need_input=False`` skips the input gradient (first layer of a network).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    upstream = as_tensor(upstream)
    _check_conv(x, kernel, None if bias is None else as_tensor(bias), stride)
    cout = kernel.shape[0]
    kshape = kernel.shape[2:]
    kd, kh, kw = kshape
    pads, out_shape = _conv_geometry(x.shape, kshape, stride, padding)
    if upstream.shape != (cout, *out_shape):
        raise ShapeError(f"upstream shape {upstream.shape} != conv output {(cout, *out_shape)}")
    od, oh, ow = out_shape
    db = upstream.sum(axis=(1, 2, 3))
    if kshape == (1, 1, 1) and stride == 1:
        u = upstream.reshape(cout, -1)
        dw = u @ x.reshape(x.shape[0], -1).T
        dx = (kernel.reshape(cout, -1).T @ u).reshape(x.shape) if need_input else None
        return LayerGrad(dx, dw.reshape(kernel.shape), db)
    xp = np.pad(x, [(0, 0)] + pads) if any(p != (0, 0) for p in pads) else x
    win = _windows(xp, kshape, stride)
    w2 = kernel.reshape(cout, -1)
    up2 = upstream.reshape(cout, od, oh * ow)

    dw = np.zeros_like(w2)
    dxp = np.zeros_like(xp) if need_input else None
    cin = x.shape[0]
    s = stride
    for lo, hi in _slabs(od, w2.shape[1] * oh * ow):
        u = up2[:, lo:hi].reshape(cout, -1)
        dw += u @ _patches(win, lo, hi).T
        if need_input:
            dp = (w2.T @ u).reshape(cin, kd, kh, kw, hi - lo, oh, ow)
            for a in range(kd):
                za = a + lo * s
                for b in range(kh):
                    for c in range(kw):
                        dxp[:, za:za + (hi - lo - 1) * s + 1:s,
                            b:b + (oh - 1) * s + 1:s,
                            c:c + (ow - 1) * s + 1:s] += dp[:, a, b, c]
    dx = None
    if need_input:
        (d0, _), (h0, _), (w0, _) = pads
        _, d, h, w = x.shape
        dx = dxp[:, d0:d0 + d, h0:h0 + h, w0:w0 + w].copy()
    return LayerGrad(dx, dw.reshape(kernel.shape), db)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_pool_input(x):
    if x.ndim != 4:
        raise ShapeError(f"maxpool3d input must be (C, D, H, W), got {x.shape}")
    _, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d needs even spatial dims, got {(d, h, w)}")


def _pair_max(x, axis):
    pick = (slice(None),) * axis
    return np.maximum(x[pick + (slice(0, None, 2),)], x[pick + (slice(1, None, 2),)])


def maxpool3d(x, return_indices: bool = False):
    """Disjoint 2x2x2 max-pooling with stride 2.

    With ``return_indices`` the row-major window offset (0..7, int8) of each
    maximum is returned as well; on ties the first maximum in row-major
    window order wins.
    """
    x = as_tensor(x)
    _check_pool_input(x)
    out = _pair_max(_pair_max(_pair_max(x, 3), 2), 1)
    if not return_indices:
        return out
    idx = np.full(out.shape, 7, dtype=np.int8)
    views = _window_views(x)
    for k in range(6, -1, -1):  # descending, so the lowest matching offset is written last
        np.copyto(idx, k, where=views[k] == out)
    return out, idx


def _window_views(x):
    return [x[:, a::2, b::2, c::2] for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def maxpool3d_grad(x, upstream, indices=None) -> LayerGrad:
    """Route each upstream value to its window's recorded maximum."""
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    _check_pool_input(x)
    c, d, h, w = x.shape
    if upstream.shape != (c, d // 2, h // 2, w // 2):
        raise ShapeError(f"upstream shape {upstream.shape} != pool output {(c, d // 2, h // 2, w // 2)}")
    if indices is None:
        _, indices = maxpool3d(x, return_indices=True)
    if indices.shape != upstream.shape:
        raise ShapeError(f"argmax record {indices.shape} does not match upstream {upstream.shape}")
    full = np.zeros(x.shape)
    for k, view in enumerate(_window_views(full)):
        np.copyto(view, upstream, where=indices == k)
    return LayerGrad(full)


# ---------------------------------------------------------------------------
# dense + activations
# ---------------------------------------------------------------------------

def dense(x, weights, bias) -> np.ndarray:
    """``weights @ x + bias``; ``x`` may also be a batch of row vectors."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight columns {weights.shape[1]}")
    if np.shape(bias) != (weights.shape[0],):
        raise ShapeError(f"bias shape {np.shape(bias)} != ({weights.shape[0]},)")
    return x @ weights.T + bias


def dense_grad(x, weights, upstream) -> LayerGrad:
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if upstream.shape[-1] != weights.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream shape {upstream.shape} incompatible with dense output")
    dx = upstream @ weights
    if x.ndim == 1:
        dw = np.outer(upstream, x)
        db = upstream.copy()
    else:
        dw = upstream.T @ x
        db = upstream.sum(axis=0)
    return LayerGrad(dx, dw, db)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x, upstream) -> np.ndarray:
    return np.where(np.asarray(x) > 0, upstream, 0.0)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: dict, grads: dict, state: OptimState) -> dict:
    """Classical momentum SGD, updating ``params`` in place.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {bad}; step rejected")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name} shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.learning_rate * v
    return params


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_tensor(fh, arr) -> None:
    arr = as_tensor(arr)
    fh.write((json.dumps({"shape": list(arr.shape)}) + "\n").encode())
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise ValueError("tensor header is not newline-terminated")
    try:
        header = json.loads(line)
        shape = tuple(int(n) for n in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed tensor header {line[:80]!r}") from exc
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"tensor payload truncated: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
