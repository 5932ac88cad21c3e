"""Minimal reverse-mode autodiff over numpy arrays.

Video activations use the axis order (B, T, Y, X, C). Every op returns a new
:class:`Tensor` whose backward closure accumulates into its parents' ``grad``.
Convolutions are bias-free; batch norm supplies the shift.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = True

#: smallest batch accepted by :func:`batch_norm` in training mode
MIN_BN_BATCH = 8


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self):
        return total(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = op
    out._backward = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def backward():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))
        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def backward():
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = backward
    return out


def total(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum()), (x,), "sum")
    if out.requires_grad:
        def backward():
            _accumulate(x, np.broadcast_to(out.grad, x.shape))
        out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _result(x.data * mask, (x,), "relu")
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad * mask)
        out._backward = backward
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _result(s, (x,), "sigmoid")
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad * s * (1.0 - s))
        out._backward = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        def backward():
            _accumulate(x, out.grad.reshape(x.shape))
        out._backward = backward
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = _result(np.concatenate([t.data for t in xs], axis=axis), xs, "concat")
    if out.requires_grad:
        def backward():
            parts = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
            for t, g in zip(xs, parts):
                _accumulate(t, g)
        out._backward = backward
    return out


# ------------------------------------------------------------ channel mixing


def _split_weight(w: np.ndarray, groups: int) -> np.ndarray:
    """View a channel-mixing weight as (groups, cin_per_group, cout_per_group)."""
    if groups == 1:
        if w.ndim != 2:
            raise ValueError(f"dense channel weight must be 2D, got shape {w.shape}")
        return w[None]
    if w.ndim != 3 or w.shape[0] != groups:
        raise ValueError(f"grouped weight must have shape ({groups}, cin_g, cout_g), got {w.shape}")
    return w


def _mix(x2: np.ndarray, wg: np.ndarray) -> np.ndarray:
    g, cin, cout = wg.shape
    if g == 1:
        return x2 @ wg[0]
    xg = x2.reshape(-1, g, cin).transpose(1, 0, 2)
    return (xg @ wg).transpose(1, 0, 2).reshape(-1, g * cout)


def _mix_grads(x2: np.ndarray, wg: np.ndarray, g2: np.ndarray):
    g, cin, cout = wg.shape
    if g == 1:
        return g2 @ wg[0].T, (x2.T @ g2)[None]
    xg = x2.reshape(-1, g, cin).transpose(1, 0, 2)
    gg = g2.reshape(-1, g, cout).transpose(1, 0, 2)
    dx = (gg @ wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(-1, g * cin)
    dw = xg.transpose(0, 2, 1) @ gg
    return dx, dw


def _in_channels(wg: np.ndarray) -> int:
    return wg.shape[0] * wg.shape[1]


def conv1x1(x: Tensor, w: Tensor, groups: int = 1, stride: int = 1) -> Tensor:
    """Pointwise convolution over the last axis; optional spatial subsampling.

    ``w`` is (C_in, C_out) when ``groups == 1`` and (groups, C_in/groups,
    C_out/groups) otherwise.
    """
    wg = _split_weight(w.data, groups)
    xs = x.data
    if stride > 1:
        xs = xs[:, :, ::stride, ::stride, :]
    if xs.shape[-1] != _in_channels(wg):
        raise ValueError(f"conv1x1: input has {xs.shape[-1]} channels, weight expects {_in_channels(wg)}")
    lead = xs.shape[:-1]
    x2 = xs.reshape(-1, xs.shape[-1])
    y = _mix(x2, wg)
    out = _result(y.reshape(*lead, y.shape[-1]), (x, w), "conv1x1")
    if out.requires_grad:
        def backward():
            dx2, dw = _mix_grads(x2, wg, out.grad.reshape(-1, out.shape[-1]))
            if x.requires_grad:
                dx = dx2.reshape(*lead, -1)
                if stride > 1:
                    full = np.zeros_like(x.data)
                    full[:, :, ::stride, ::stride, :] = dx
                    dx = full
                _accumulate(x, dx)
            _accumulate(w, dw.reshape(w.shape))
        out._backward = backward
    return out


# ------------------------------------------------------- temporal convolution


def inflate_filter(k, r: int) -> np.ndarray:
    """Insert ``r - 1`` zeros between consecutive taps along axis 0."""
    k = np.asarray(k)
    if r < 1:
        raise ValueError("dilation must be >= 1")
    n = k.shape[0]
    out = np.zeros((r * (n - 1) + 1,) + k.shape[1:], dtype=k.dtype)
    out[::r] = k
    return out


def _temporal_shift_conv(x: Tensor, w: Tensor, offsets: Sequence[int], groups: int, op: str) -> Tensor:
    """out(t) = sum_j x(t - offsets[j]) @ w[j], zero outside [0, T), tap-major order."""
    if x.ndim != 5:
        raise ValueError(f"{op}: expected a (B,T,Y,X,C) tensor, got shape {x.shape}")
    wgs = [_split_weight(w.data[j], groups) for j in range(w.shape[0])]
    cin = _in_channels(wgs[0])
    if x.shape[-1] != cin:
        raise ValueError(f"{op}: input has {x.shape[-1]} channels, filter expects {cin}")
    B, T = x.shape[:2]
    pad = max(abs(o) for o in offsets)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0), (0, 0), (0, 0)))
    cout = wgs[0].shape[0] * wgs[0].shape[2]
    acc = np.zeros(x.shape[:-1] + (cout,), dtype=x.data.dtype)
    flat = acc.reshape(-1, cout)
    cols = []
    for j, off in enumerate(offsets):
        lo = pad - off
        seg = xp[:, lo:lo + T].reshape(-1, cin)
        cols.append(seg)
        flat += _mix(seg, wgs[j])
    out = _result(acc, (x, w), op)
    if out.requires_grad:
        def backward():
            g2 = out.grad.reshape(-1, cout)
            dxp = np.zeros_like(xp) if x.requires_grad else None
            dw = np.zeros_like(w.data)
            for j, off in enumerate(offsets):
                dseg, dwj = _mix_grads(cols[j], wgs[j], g2)
                dw[j] = dwj.reshape(w.shape[1:])
                if dxp is not None:
                    lo = pad - off
                    dxp[:, lo:lo + T] += dseg.reshape(x.shape)
            if dxp is not None:
                _accumulate(x, dxp[:, pad:pad + T])
            _accumulate(w, dw)
        out._backward = backward
    return out


def _check_taps(n: int) -> int:
    if n % 2 != 1:
        raise ValueError(f"temporal filter length must be odd, got {n}")
    return n // 2


def temporal_conv1d_dilated(x: Tensor, w: Tensor, r: int, groups: int = 1) -> Tensor:
    """Temporally dilated 1D convolution with "same" zero padding.

    ``w`` has shape (2d+1, C_in, C_out) (or (2d+1, groups, C_in/g, C_out/g)).
    Output at time t sums x(t1) * w(t2 + d) over all t1 + r*t2 = t.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"dilation must be a positive integer, got {r}")
    d = _check_taps(w.shape[0])
    offsets = [r * (j - d) for j in range(2 * d + 1)]
    return _temporal_shift_conv(x, w, offsets, groups, "temporal_conv1d_dilated")


def temporal_conv1d(x: Tensor, w: Tensor, groups: int = 1) -> Tensor:
    """Undilated temporal convolution, visiting every tap (zeros included)."""
    d = _check_taps(w.shape[0])
    return _temporal_shift_conv(x, w, [j - d for j in range(2 * d + 1)], groups, "temporal_conv1d")


# -------------------------------------------------------- spatial operations


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total_pad = max((out - 1) * s + k - n, 0)
    return out, total_pad // 2, total_pad - total_pad // 2


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Spatial convolution (cross-correlation) applied frame by frame.

    ``w`` has shape (kh, kw, C_in, C_out); padding is "same" so a stride ``s``
    maps a spatial size n to ceil(n / s).
    """
    kh, kw, cin, cout = w.shape
    if x.ndim != 5 or x.shape[-1] != cin:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with weight {w.shape}")
    B, T, H, W, _ = x.shape
    Ho, ph0, ph1 = _same_pad(H, kh, stride)
    Wo, pw0, pw1 = _same_pad(W, kw, stride)
    xp = np.pad(x.data.reshape(B * T, H, W, cin), ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    # (N, Ho, Wo, C, kh, kw) view -> one contiguous copy in (kh, kw, C) order
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.data.reshape(-1, cout)
    y = (cols2 @ w2).reshape(B, T, Ho, Wo, cout)
    out = _result(y, (x, w), "conv2d")
    if out.requires_grad:
        def backward():
            g2 = out.grad.reshape(-1, cout)
            _accumulate(w, (cols2.T @ g2).reshape(w.shape))
            if x.requires_grad:
                dcols = (g2 @ w2.T).reshape(cols.shape)
                dxp = np.zeros_like(xp)
                for dy in range(kh):
                    for dx in range(kw):
                        dxp[:, dy:dy + stride * (Ho - 1) + 1:stride,
                            dx:dx + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, dy, dx, :]
                _accumulate(x, dxp[:, ph0:ph0 + H, pw0:pw0 + W, :].reshape(x.shape))
        out._backward = backward
    return out


def max_pool_spatial(x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    """Spatial max pooling with "same" padding; ties route the gradient to the first tap."""
    B, T, H, W, C = x.shape
    Ho, ph0, ph1 = _same_pad(H, window, stride)
    Wo, pw0, pw1 = _same_pad(W, window, stride)
    xp = np.pad(x.data.reshape(B * T, H, W, C), ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)),
                constant_values=-np.inf)
    taps = [(slice(dy, dy + stride * (Ho - 1) + 1, stride), slice(dx, dx + stride * (Wo - 1) + 1, stride))
            for dy in range(window) for dx in range(window)]
    y = xp[:, taps[0][0], taps[0][1], :].copy()
    arg = np.zeros(y.shape, dtype=np.int8)
    for i, (sy, sx) in enumerate(taps[1:], start=1):
        tap = xp[:, sy, sx, :]
        better = tap > y
        np.copyto(y, tap, where=better)
        np.copyto(arg, i, where=better)
    out = _result(y.reshape(B, T, Ho, Wo, C), (x,), "max_pool_spatial")
    if out.requires_grad:
        def backward():
            g = out.grad.reshape(B * T, Ho, Wo, C)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i, (sy, sx) in enumerate(taps):
                dxp[:, sy, sx, :] += np.where(arg == i, g, 0)
            _accumulate(x, dxp[:, ph0:ph0 + H, pw0:pw0 + W, :].reshape(x.shape))
        out._backward = backward
    return out


def avg_pool(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = _result(x.data.mean(axis=axes), (x,), "avg_pool")
    if out.requires_grad:
        def backward():
            _accumulate(x, np.broadcast_to(np.expand_dims(out.grad, axes), x.shape) / n)
        out._backward = backward
    return out


def max_pool(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    arg = x.data.argmax(axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = _result(y, (x,), "max_pool")
    if out.requires_grad:
        def backward():
            g = np.zeros_like(x.data)
            np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis), axis=axis)
            _accumulate(x, g)
        out._backward = backward
    return out


# --------------------------------------------------------------- batch norm


class RunningStats:
    """Exponential moving averages of per-channel batch statistics.

    Averages are bias-corrected (as in Adam) so short training runs do not
    evaluate against the zero/one initial values.
    """

    def __init__(self, channels: int, momentum: float = 0.99):
        self.momentum = momentum
        self.mean_acc = np.zeros(channels)
        self.var_acc = np.zeros(channels)
        self.steps = 0

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean_acc = m * self.mean_acc + (1 - m) * mean
        self.var_acc = m * self.var_acc + (1 - m) * var
        self.steps += 1

    @property
    def mean(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros_like(self.mean_acc)
        return self.mean_acc / (1 - self.momentum ** self.steps)

    @property
    def var(self) -> np.ndarray:
        if self.steps == 0:
            return np.ones_like(self.var_acc)
        return self.var_acc / (1 - self.momentum ** self.steps)

    def state(self) -> dict:
        return {"mean_acc": self.mean_acc.tolist(), "var_acc": self.var_acc.tolist(), "steps": self.steps}


def _fold(n: int, C: int, target: int = 512) -> int:
    """Largest k <= target/C dividing n; rows of k*C elements keep numpy's inner loops long."""
    k = max(1, min(n, target // max(C, 1)))
    while n % k:
        k -= 1
    return k


def batch_norm(x: Tensor, scale: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5,
               training: bool = True, running: RunningStats | None = None, relu: bool = False) -> Tensor:
    """Per-channel normalization over every axis but the last.

    Training mode uses batch statistics (and updates ``running`` if given);
    evaluation mode uses ``running``. ``scale``/``shift`` may be omitted for a
    non-affine normalization. ``relu=True`` fuses a trailing ReLU.
    """
    C = x.shape[-1]
    n = x.data.size // C
    k = _fold(n, C)
    # (n, C) viewed as (n/k, k*C): channel c sits at columns c, c+C, c+2C, ...
    x2 = x.data.reshape(n // k, k * C)
    dtype = x2.dtype
    ones = np.ones(n // k, dtype=dtype)

    def channel_sum(a):
        return (ones @ a).reshape(k, C).sum(axis=0)

    def wide(v):
        w = np.empty((k, C), dtype=dtype)
        w[...] = v
        return w.reshape(-1)

    if training:
        if x.shape[0] < MIN_BN_BATCH:
            raise ValueError(f"batch_norm in training mode needs batch >= {MIN_BN_BATCH}, got {x.shape[0]}")
        mean = channel_sum(x2) / n
        centered = x2 - wide(mean)
        var = channel_sum(centered * centered) / n
        if running is not None:
            running.update(mean, var)
    else:
        if running is None:
            raise ValueError("evaluation-mode batch_norm needs running statistics")
        mean, var = running.mean, running.var
        centered = x2 - wide(mean)
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    inv_w = wide(inv)
    xhat = centered * inv_w
    y = xhat
    if scale is not None:
        y = y * wide(scale.data)
    if shift is not None:
        y = y + wide(shift.data) if y is xhat else np.add(y, wide(shift.data), out=y)
    if relu:
        y = np.maximum(y, 0, out=None if y is xhat else y)
    parents = tuple(t for t in (x, scale, shift) if t is not None)
    out = _result(y.astype(dtype, copy=False).reshape(x.shape), parents, "batch_norm")
    if out.requires_grad:
        def backward():
            g = out.grad.reshape(n // k, k * C)
            if relu:
                g = g * (out.data.reshape(n // k, k * C) > 0)
            if scale is not None:
                _accumulate(scale, channel_sum(g * xhat))
            if shift is not None:
                _accumulate(shift, channel_sum(g))
            if x.requires_grad:
                dxhat = g * wide(scale.data) if scale is not None else g
                if training:
                    s1 = wide(channel_sum(dxhat))
                    s2 = wide(channel_sum(dxhat * xhat))
                    dx = dxhat * n
                    dx -= s1
                    dx -= xhat * s2
                    dx *= inv_w / n
                else:
                    dx = dxhat * inv_w
                _accumulate(x, dx.reshape(x.shape))
        out._backward = backward
    return out


# --------------------------------------------------------------- aggregation


def gated_weighted_sum(inputs: Sequence[Tensor], logits: Sequence) -> Tensor:
    """Sum of ``sigmoid(w_i) * F_i``; each logit is a scalar tensor or float."""
    if not inputs:
        raise ValueError("gated_weighted_sum needs at least one input")
    if len(logits) != len(inputs):
        raise ValueError(f"{len(inputs)} inputs but {len(logits)} logits")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ValueError(f"gated_weighted_sum: shape mismatch {t.shape} vs {shape}")
    ws = [_as_tensor(w) for w in logits]
    gates = [float(_sigmoid(w.data)) for w in ws]
    y = gates[0] * inputs[0].data
    for gate, t in zip(gates[1:], inputs[1:]):
        y = y + gate * t.data
    out = _result(np.asarray(y, dtype=inputs[0].data.dtype), tuple(inputs) + tuple(ws), "gated_weighted_sum")
    if out.requires_grad:
        def backward():
            g = out.grad
            for gate, t, w in zip(gates, inputs, ws):
                _accumulate(t, gate * g)
                if w.requires_grad:
                    _accumulate(w, np.asarray(gate * (1 - gate) * np.vdot(g, t.data)).reshape(w.shape))
        out._backward = backward
    return out


# ------------------------------------------------------------------- head


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y, parents, "linear")
    if out.requires_grad:
        def backward():
            g = out.grad
            _accumulate(x, g @ w.data.T)
            _accumulate(w, x.data.T @ g)
            if b is not None:
                _accumulate(b, g.sum(axis=0))
        out._backward = backward
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against one-hot targets smoothed toward uniform."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"label out of range [0, {K})")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    target = np.full((B, K), label_smoothing / K)
    target[np.arange(B), labels] += 1.0 - label_smoothing
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(target * logp).sum() / B
    out = _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "softmax_cross_entropy")
    if out.requires_grad:
        def backward():
            _accumulate(logits, out.grad * (np.exp(logp) - target) / B)
        out._backward = backward
    return out


# --------------------------------------------------------- gradient check


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], perturbation: float = 1e-6,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The op output is reduced with a fixed random projection so non-scalar ops
    are checked on every output element. Relative errors are measured against
    the larger of the two gradient magnitudes, floored at 1e-3 of that input's
    largest numeric gradient so exactly-zero entries do not divide by zero.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        probe = op(*inputs)
    proj = rng.standard_normal(probe.shape)

    def objective() -> float:
        with no_grad():
            return float(np.vdot(op(*inputs).data, proj))

    for t in inputs:
        t.grad = None
    out = op(*inputs)
    out.backward(proj.astype(out.data.dtype))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = objective()
            flat[i] = orig - perturbation
            down = objective()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * perturbation)
        floor = max(1e-3 * np.abs(numeric).max(), 1e-12)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
