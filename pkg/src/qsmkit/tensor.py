"""Minimal deterministic tensor engine with reverse-mode autodiff.

Tensors wrap dense float32/float64 numpy arrays laid out N x C x D x H x W
for network data.  Differentiable operations record themselves on a
thread-local tape in execution order; ``backward`` sweeps that tape once
in reverse, accumulates gradients into every leaf that participated in
the forward pass, and clears the tape.  Everything is single-threaded
per graph; separate threads get separate tapes.
"""

import threading

import numpy as np

from . import backend
from .errors import ConfigError, NumericError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = GraphTape()
        _state.grad_enabled = True
    return _state


class GraphTape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self.nodes = []
        self.leaves = []
        self._leaf_ids = set()
        self.live = True

    def record(self, node):
        self.nodes.append(node)
        for p in node.parents:
            if p._node is None and p.requires_grad and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self.leaves.append(p)

    def clear(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes = []
        self.leaves = []
        self._leaf_ids = set()
        self.live = False


class _Node:
    __slots__ = ("parents", "backward_fn", "out", "tape")

    def __init__(self, parents, backward_fn, out, tape):
        self.parents = parents
        self.backward_fn = backward_fn
        self.out = out
        self.tape = tape


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev


class Tensor:
    """Dense float array plus optional gradient and graph back-reference."""

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), float(other))


def _record(out, parents, backward_fn):
    s = _tls()
    if not s.grad_enabled or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    if not s.tape.live:
        s.tape = GraphTape()
    node = _Node(parents, backward_fn, out, s.tape)
    out._node = node
    s.tape.record(node)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad = t.grad + g.astype(t.dtype, copy=False)


def _scalar(x, like):
    out = np.float64(x) if like.dtype == np.float64 else np.float32(x)
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)

        def bw(g):
            _accum(a, g)
            _accum(b, g)

        return _record(out, [a, b], bw)
    c = _scalar(b, a)
    out = Tensor(a.data + c)

    def bw(g):
        _accum(a, g)

    return _record(out, [a], bw)


def mul(a, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)

        def bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _record(out, [a, b], bw)
    c = _scalar(b, a)
    out = Tensor(a.data * c)

    def bw(g):
        _accum(a, g * c)

    return _record(out, [a], bw)


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _record(out, [x], bw)


def mse(a, b):
    """Mean squared difference of two equal-shape tensors (scalar output)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    val = np.mean(diff * diff)
    out = Tensor(np.asarray(val, dtype=a.dtype))
    scale = 2.0 / diff.size

    def bw(g):
        gg = float(g) * scale * diff
        _accum(a, gg)
        _accum(b, -gg)

    return _record(out, [a, b], bw)


def activation(x, kind):
    """Elementwise relu or sigmoid."""
    if kind == "relu":
        out = Tensor(np.maximum(x.data, 0))

        def bw(g):
            _accum(x, g * (x.data > 0))

        return _record(out, [x], bw)
    if kind == "sigmoid":
        # 1/(1+e^-x) evaluated stably for both signs, clamped to the
        # open interval so saturation never returns exactly 0 or 1
        d = x.data
        pos = d >= 0
        y = np.empty_like(d)
        y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        y[~pos] = e / (1.0 + e)
        fi = np.finfo(d.dtype)
        np.clip(y, fi.tiny, np.nextafter(d.dtype.type(1.0), d.dtype.type(0.0)), out=y)
        out = Tensor(y)

        def bw(g):
            _accum(x, g * y * (1.0 - y))

        return _record(out, [x], bw)
    raise ConfigError(f"unknown activation kind {kind!r}")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def dropout(x, rate, mode, rng=None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = _scalar(1.0 / (1.0 - rate), x)
    out = Tensor(x.data * keep * scale)

    def bw(g):
        _accum(x, g * keep * scale)

    return _record(out, [x], bw)


def concat_channels(a, b):
    """Concatenate along the channel axis (axis 1); a's channels first."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat: rank mismatch")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: incompatible extents {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _record(out, [a, b], bw)


# ---------------------------------------------------------------------------
# 3D network ops (hot paths dispatched through the kernel backend)


def _check_5d(x, name):
    if x.data.ndim != 5:
        raise ShapeError(f"{name}: expected N x C x D x H x W, got {x.shape}")


def conv3d(x, w, b=None, stride=1, padding=None):
    """3D convolution, cubic kernel of size 3 (pad 1) or 1 (pad 0), stride 1.

    ``b`` may be None for bias-free layers (convolutions feeding a batch
    norm, whose mean subtraction would cancel a bias exactly).
    """
    _check_5d(x, "conv3d")
    if w.data.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"conv3d: weights must be Cout x Cin x k^3, got {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise ShapeError(f"conv3d: kernel size {k} not supported (1 or 3)")
    if stride != 1:
        raise ShapeError("conv3d: only stride 1 is supported")
    if padding is None:
        padding = k // 2
    if padding != k // 2:
        raise ShapeError(f"conv3d: padding {padding} breaks the same-size contract for k={k}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")
    if not np.isfinite(x.data).all() or not np.isfinite(w.data).all():
        raise NumericError("conv3d: non-finite input")
    bias_vals = b.data if b is not None else np.zeros(w.shape[0], dtype=x.dtype)
    out = Tensor(backend.conv3d_forward(x.data, w.data, bias_vals, padding))
    parents = [x, w] if b is None else [x, w, b]

    def bw(g):
        g = np.ascontiguousarray(g)
        _accum(x, backend.conv3d_backward_input(g, w.data, padding))
        _accum(w, backend.conv3d_backward_weights(x.data, g, k, padding))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(b.dtype))

    return _record(out, parents, bw)


def conv_transpose3d(x, w, b):
    """Transposed 3D convolution, kernel 2^3, stride 2; doubles each extent."""
    _check_5d(x, "conv_transpose3d")
    if w.data.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"conv_transpose3d: weights must be Cin x Cout x 2^3, got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose3d: input has {x.shape[1]} channels, weights expect {w.shape[0]}"
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose3d: bias shape {b.shape} != ({w.shape[1]},)")
    if not np.isfinite(x.data).all() or not np.isfinite(w.data).all():
        raise NumericError("conv_transpose3d: non-finite input")
    out = Tensor(backend.tconv3d_forward(x.data, w.data, b.data))

    def bw(g):
        g = np.ascontiguousarray(g)
        _accum(x, backend.tconv3d_backward_input(g, w.data))
        _accum(w, backend.tconv3d_backward_weights(x.data, g))
        _accum(b, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(b.dtype))

    return _record(out, [x, w, b], bw)


def maxpool3d(x):
    """2^3 max pooling with stride 2; halves each spatial extent."""
    _check_5d(x, "maxpool3d")
    d, h, w = x.shape[2:]
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d: spatial extents {x.shape[2:]} must be even")
    vals, idx = backend.maxpool3d_forward(x.data)
    out = Tensor(vals)

    def bw(g):
        _accum(x, backend.maxpool3d_backward(np.ascontiguousarray(g), idx, x.shape))

    return _record(out, [x], bw)


def batchnorm3d(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over N x D x H x W.

    Train mode normalizes by batch statistics and updates the running
    buffers in place; eval mode normalizes by the running buffers.
    """
    _check_5d(x, "batchnorm3d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d: affine shape mismatch for {c} channels")
    axes = (0, 2, 3, 4)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
    if m == 0:
        raise ShapeError("batchnorm3d: zero-element channel")
    if mode == "train":
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    elif mode == "eval":
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    else:
        raise ConfigError(f"batchnorm3d mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data.astype(np.float64) - mean[None, :, None, None, None]) * inv[
        None, :, None, None, None
    ]
    out_vals = gamma.data[None, :, None, None, None] * xhat.astype(x.dtype) + beta.data[
        None, :, None, None, None
    ]
    out = Tensor(out_vals.astype(x.dtype))
    xhat32 = xhat.astype(x.dtype)

    def bw(g):
        _accum(beta, g.sum(axis=axes, dtype=np.float64).astype(beta.dtype))
        _accum(gamma, (g * xhat32).sum(axis=axes, dtype=np.float64).astype(gamma.dtype))
        gs = gamma.data.astype(np.float64)[None, :, None, None, None]
        g64 = g.astype(np.float64)
        if mode == "eval":
            gx = g64 * gs * inv[None, :, None, None, None]
        else:
            gmean = g64.mean(axis=axes)[None, :, None, None, None]
            gxhat_mean = (g64 * xhat).mean(axis=axes)[None, :, None, None, None]
            gx = gs * inv[None, :, None, None, None] * (g64 - gmean - xhat * gxhat_mean)
        _accum(x, gx.astype(x.dtype))

    return _record(out, [x, gamma, beta], bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss):
    """Populate gradients of everything reachable from a scalar loss.

    Every leaf tensor with ``requires_grad`` that participated in the
    forward pass receives a gradient (zeros when unreachable from the
    loss).  The tape is cleared; a second backward without a fresh
    forward raises UsageError.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward expects a scalar tensor")
    node = loss._node
    s = _tls()
    if node is None or node.tape is not s.tape or not s.tape.live:
        raise UsageError("loss is not on the live tape; re-run the forward pass")
    loss.grad = np.ones_like(loss.data)
    for n in reversed(s.tape.nodes):
        g = n.out.grad
        if g is None:
            continue
        n.backward_fn(g)
    for leaf in s.tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    s.tape.clear()
    s.tape = GraphTape()


def zero_grad(params):
    for p in params:
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# trainable parameters and their optimizer


class Parameter:
    """Trainable tensor with Adam moment accumulators."""

    def __init__(self, values, name=""):
        self.tensor = Tensor(values, requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, values):
        self.tensor.data = values

    @property
    def grad(self):
        return self.tensor.grad


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over the given parameters (conventional defaults)."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise UsageError(f"adam_step: parameter {p.name or '<unnamed>'} has no gradient")
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        mhat = p.adam_m / (1.0 - beta1**t)
        vhat = p.adam_v / (1.0 - beta2**t)
        p.tensor.data = p.tensor.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(
            p.tensor.dtype
        )
