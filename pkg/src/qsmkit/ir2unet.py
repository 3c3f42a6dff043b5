"""Iterated recurrent U-net with reverse concatenations.

The reconstructor cascades T structurally identical 3-level U-nets.
Each iteration receives, per encoder level, the previous iteration's
decoder output at the matching resolution (reverse concatenation,
zero-filled at t=1) alongside the usual same-iteration skip
connections.  A gated recurrent module sits at the bottleneck and
carries a hidden state across iterations.  Every iteration emits a
single-channel latent estimate through a 1^3 head; the T latents are
channel-concatenated and fused by a final 1^3 convolution.

Iterations use separate parameters.  Channel plan per iteration with
base width C: encoders emit C, 2C, 4C; the recurrent module maps
4C -> 4C at 1/8 resolution; decoders emit 4C, 2C, C on the way up.
"""

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    batchnorm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dropout,
    maxpool3d,
    no_grad,
    relu,
    sigmoid,
)

_DTYPES = {"float32": np.float32, "float64": np.float64}
INIT_STD = 0.01


@dataclass
class NetworkConfig:
    """Architecture hyperparameters."""

    T: int = 4
    levels: int = 3
    base_channels: int = 16
    dropout_rate: float = 0.05
    share_weights_across_iterations: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"iteration count T must be >= 1, got {self.T}")
        if self.levels != 3:
            raise ConfigError("encoder/decoder depth is fixed at 3")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.share_weights_across_iterations:
            raise ConfigError("iterations do not share parameters")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype}")


@dataclass
class IterationState:
    """Features carried from iteration t-1 into iteration t."""

    rc_features: list
    rm_hidden: object = None
    latent_outputs: list = field(default_factory=list)


class Network:
    """Parameter set: per-iteration replicas plus one shared fusion conv."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.params = {}
        self.buffers = {}

    def parameters(self):
        return list(self.params.values())

    def parameter(self, name):
        return self.params[name]

    def named_arrays(self):
        """All persistent arrays (parameters then buffers), name-sorted."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return dict(sorted(out.items()))

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {name!r}")
            p.data = arrays[name].astype(p.data.dtype)
        for name in self.buffers:
            if name not in arrays:
                raise ConfigError(f"checkpoint missing buffer {name!r}")
            self.buffers[name] = arrays[name].astype(self.buffers[name].dtype)


def _channel_plan(c):
    # (enc_in, enc_out) per level, including RC channels in the input
    return {
        "enc_in": (1 + c, c + 2 * c, 2 * c + 4 * c),
        "enc_out": (c, 2 * c, 4 * c),
        "dec_out": (c, 2 * c, 4 * c),  # indexed by level, level 3 deepest
    }


def _add_conv(net, name, cout, cin, k, rng, dtype, bias=True):
    # convolutions feeding a batch norm are bias-free: the normalizer's
    # mean subtraction cancels a bias exactly, leaving it zero-gradient
    net.params[f"{name}/weight"] = Parameter(
        rng.normal(0.0, INIT_STD, (cout, cin, k, k, k)).astype(dtype), name=f"{name}/weight"
    )
    if bias:
        net.params[f"{name}/bias"] = Parameter(
            rng.normal(0.0, INIT_STD, (cout,)).astype(dtype), name=f"{name}/bias"
        )


def _add_tconv(net, name, cin, cout, rng, dtype):
    net.params[f"{name}/weight"] = Parameter(
        rng.normal(0.0, INIT_STD, (cin, cout, 2, 2, 2)).astype(dtype), name=f"{name}/weight"
    )
    net.params[f"{name}/bias"] = Parameter(
        rng.normal(0.0, INIT_STD, (cout,)).astype(dtype), name=f"{name}/bias"
    )


def _add_bn(net, name, c, dtype):
    net.params[f"{name}/gamma"] = Parameter(np.ones(c, dtype=dtype), name=f"{name}/gamma")
    net.params[f"{name}/beta"] = Parameter(np.zeros(c, dtype=dtype), name=f"{name}/beta")
    net.buffers[f"{name}/running_mean"] = np.zeros(c, dtype=dtype)
    net.buffers[f"{name}/running_var"] = np.ones(c, dtype=dtype)


def build_network(cfg, rng):
    """Instantiate all parameters; conv weights/biases drawn N(0, 0.01^2)."""
    net = Network(cfg)
    dtype = _DTYPES[cfg.dtype]
    c = cfg.base_channels
    plan = _channel_plan(c)
    for t in range(1, cfg.T + 1):
        for i in (1, 2, 3):
            cin, cout = plan["enc_in"][i - 1], plan["enc_out"][i - 1]
            base = f"iter{t}/enc{i}"
            _add_conv(net, f"{base}/conv1", cout, cin, 3, rng, dtype, bias=False)
            _add_bn(net, f"{base}/bn1", cout, dtype)
            _add_conv(net, f"{base}/conv2", cout, cout, 3, rng, dtype, bias=False)
            _add_bn(net, f"{base}/bn2", cout, dtype)
        cb = 4 * c
        _add_conv(net, f"iter{t}/rm/conv_x", cb, cb, 3, rng, dtype, bias=False)
        _add_conv(net, f"iter{t}/rm/conv_h", cb, cb, 3, rng, dtype, bias=False)
        _add_conv(net, f"iter{t}/rm/conv_a", cb, cb, 3, rng, dtype)
        _add_bn(net, f"iter{t}/rm/bn_x", cb, dtype)
        _add_bn(net, f"iter{t}/rm/bn_h", cb, dtype)
        for i in (3, 2, 1):
            up_in = 4 * c if i == 3 else plan["dec_out"][i]
            cout = plan["dec_out"][i - 1]
            skip = plan["enc_out"][i - 1]
            base = f"iter{t}/dec{i}"
            _add_tconv(net, f"{base}/up", up_in, cout, rng, dtype)
            _add_conv(net, f"{base}/conv1", cout, cout + skip, 3, rng, dtype, bias=False)
            _add_bn(net, f"{base}/bn1", cout, dtype)
            _add_conv(net, f"{base}/conv2", cout, cout, 3, rng, dtype, bias=False)
            _add_bn(net, f"{base}/bn2", cout, dtype)
        _add_conv(net, f"iter{t}/head", 1, c, 1, rng, dtype)
    _add_conv(net, "fusion", 1, cfg.T, 1, rng, dtype)
    return net


def _conv_bn_relu(net, base, conv, bn, x, mode, rate, rng):
    p = net.params
    out = conv3d(x, p[f"{base}/{conv}/weight"].tensor)
    out = batchnorm3d(
        out,
        p[f"{base}/{bn}/gamma"].tensor,
        p[f"{base}/{bn}/beta"].tensor,
        net.buffers[f"{base}/{bn}/running_mean"],
        net.buffers[f"{base}/{bn}/running_var"],
        mode,
    )
    out = relu(out)
    return dropout(out, rate, mode, rng)


def _enc_block(net, base, x, mode, rate, rng):
    out = _conv_bn_relu(net, base, "conv1", "bn1", x, mode, rate, rng)
    return _conv_bn_relu(net, base, "conv2", "bn2", out, mode, rate, rng)


_dec_block = _enc_block


def recurrent_module_forward(net, t, x_t, h_prev, mode="train", rng=None):
    """Gated bottleneck update: Y = path_x(X)*a + path_h(H)*(1-a), H_t = Y."""
    if x_t.shape != h_prev.shape:
        raise ShapeError(
            f"recurrent module: feature shape {x_t.shape} vs hidden {h_prev.shape}"
        )
    p = net.params
    rate = net.cfg.dropout_rate
    base = f"iter{t}/rm"
    px = conv3d(x_t, p[f"{base}/conv_x/weight"].tensor)
    px = batchnorm3d(
        px,
        p[f"{base}/bn_x/gamma"].tensor,
        p[f"{base}/bn_x/beta"].tensor,
        net.buffers[f"{base}/bn_x/running_mean"],
        net.buffers[f"{base}/bn_x/running_var"],
        mode,
    )
    px = dropout(relu(px), rate, mode, rng)
    ph = conv3d(h_prev, p[f"{base}/conv_h/weight"].tensor)
    ph = batchnorm3d(
        ph,
        p[f"{base}/bn_h/gamma"].tensor,
        p[f"{base}/bn_h/beta"].tensor,
        net.buffers[f"{base}/bn_h/running_mean"],
        net.buffers[f"{base}/bn_h/running_var"],
        mode,
    )
    ph = dropout(relu(ph), rate, mode, rng)
    alpha = sigmoid(
        conv3d(x_t, p[f"{base}/conv_a/weight"].tensor, p[f"{base}/conv_a/bias"].tensor)
    )
    y = px * alpha + ph * (1.0 - alpha)
    return y, y


def zero_rc_features(cfg, batch, spatial, dtype):
    """All-zero reverse-concatenation inputs for the cold start at t=1."""
    c = cfg.base_channels
    d, h, w = spatial
    shapes = (
        (batch, c, d, h, w),
        (batch, 2 * c, d // 2, h // 2, w // 2),
        (batch, 4 * c, d // 4, h // 4, w // 4),
    )
    return [Tensor(np.zeros(s, dtype=dtype)) for s in shapes]


def initial_state(cfg, batch, spatial, dtype):
    return IterationState(rc_features=zero_rc_features(cfg, batch, spatial, dtype))


def unet_iteration_forward(net, t, x, state, mode="train", rng=None):
    """One tailored U-net pass; returns chi_t and mutates the state.

    ``x`` is the single-channel iteration input; the state supplies the
    previous iteration's decoder features (reverse concatenations) and
    the recurrent hidden state, and receives this iteration's versions.
    """
    if x.shape[1] != 1:
        raise ShapeError(f"iteration input must be single-channel, got {x.shape[1]}")
    d, h, w = x.shape[2:]
    if d % 8 or h % 8 or w % 8:
        raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by 8")
    rate = net.cfg.dropout_rate
    rc1, rc2, rc3 = state.rc_features

    a1 = _enc_block(net, f"iter{t}/enc1", concat_channels(x, rc1), mode, rate, rng)
    p1 = maxpool3d(a1)
    a2 = _enc_block(net, f"iter{t}/enc2", concat_channels(p1, rc2), mode, rate, rng)
    p2 = maxpool3d(a2)
    a3 = _enc_block(net, f"iter{t}/enc3", concat_channels(p2, rc3), mode, rate, rng)
    p3 = maxpool3d(a3)

    h_prev = state.rm_hidden if state.rm_hidden is not None else p3
    y_rm, h_t = recurrent_module_forward(net, t, p3, h_prev, mode, rng)

    p = net.params

    def up(base, feat):
        return conv_transpose3d(feat, p[f"{base}/weight"].tensor, p[f"{base}/bias"].tensor)

    d3 = _dec_block(
        net, f"iter{t}/dec3", concat_channels(up(f"iter{t}/dec3/up", y_rm), a3), mode, rate, rng
    )
    d2 = _dec_block(
        net, f"iter{t}/dec2", concat_channels(up(f"iter{t}/dec2/up", d3), a2), mode, rate, rng
    )
    d1 = _dec_block(
        net, f"iter{t}/dec1", concat_channels(up(f"iter{t}/dec1/up", d2), a1), mode, rate, rng
    )
    chi_t = conv3d(
        d1, p[f"iter{t}/head/weight"].tensor, p[f"iter{t}/head/bias"].tensor, padding=0
    )

    state.rc_features = [d1, d2, d3]
    state.rm_hidden = h_t
    state.latent_outputs.append(chi_t)
    return chi_t, state


def ir2_forward(field_patch, net, mode="eval", rng=None):
    """Full T-iteration reconstruction of a field patch.

    Iteration 1 consumes the field; iteration t>1 consumes chi_{t-1}.
    Returns (chi_final, [chi_1 .. chi_T]).  Eval mode disables dropout,
    normalizes by running statistics, and records no gradient tape.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with no_grad():
            return _ir2_forward_impl(field_patch, net, mode, rng)
    return _ir2_forward_impl(field_patch, net, mode, rng)


def _ir2_forward_impl(field_patch, net, mode, rng):
    if field_patch.data.ndim != 5 or field_patch.shape[1] != 1:
        raise ShapeError(
            f"field patch must be N x 1 x D x H x W, got {field_patch.shape}"
        )
    cfg = net.cfg
    state = initial_state(cfg, field_patch.shape[0], field_patch.shape[2:], field_patch.dtype)
    x = field_patch
    for t in range(1, cfg.T + 1):
        chi_t, state = unet_iteration_forward(net, t, x, state, mode, rng)
        x = chi_t
    stacked = reduce(concat_channels, state.latent_outputs)
    chi_final = conv3d(
        stacked,
        net.params["fusion/weight"].tensor,
        net.params["fusion/bias"].tensor,
        padding=0,
    )
    return chi_final, list(state.latent_outputs)


def count_flops(cfg, input_dims):
    """Analytic multiply-accumulate count for one single-patch forward.

    Exactly affine in the iteration count: count(T) = base + T * per_iteration.
    """
    d, h, w = (int(v) for v in input_dims)
    if d % 8 or h % 8 or w % 8:
        raise ShapeError(f"input dims {input_dims} must be divisible by 8")
    c = cfg.base_channels
    plan = _channel_plan(c)

    def conv_macs(cin, cout, k, dims, bias=True):
        vox = dims[0] * dims[1] * dims[2]
        return cin * cout * k**3 * vox + (cout * vox if bias else 0)

    def bn_macs(ch, dims):
        return 2 * ch * dims[0] * dims[1] * dims[2]

    def elem(ch, dims):
        return ch * dims[0] * dims[1] * dims[2]

    res = [(d, h, w), (d // 2, h // 2, w // 2), (d // 4, h // 4, w // 4)]
    bottleneck = (d // 8, h // 8, w // 8)
    per_iter = 0
    for i in (1, 2, 3):
        cin, cout = plan["enc_in"][i - 1], plan["enc_out"][i - 1]
        r = res[i - 1]
        per_iter += conv_macs(cin, cout, 3, r, bias=False)
        per_iter += conv_macs(cout, cout, 3, r, bias=False)
        per_iter += 2 * bn_macs(cout, r) + 2 * elem(cout, r)  # 2 BN + 2 ReLU
        per_iter += elem(cout, r)  # max-pool comparisons over its input
    cb = 4 * c
    per_iter += 2 * conv_macs(cb, cb, 3, bottleneck, bias=False)  # conv_x, conv_h
    per_iter += conv_macs(cb, cb, 3, bottleneck)  # conv_a (gate)
    per_iter += 2 * bn_macs(cb, bottleneck) + 2 * elem(cb, bottleneck)
    per_iter += elem(cb, bottleneck)  # sigmoid gate
    per_iter += 4 * elem(cb, bottleneck)  # gating arithmetic
    for i in (3, 2, 1):
        up_in = 4 * c if i == 3 else plan["dec_out"][i]
        cout = plan["dec_out"][i - 1]
        skip = plan["enc_out"][i - 1]
        r_in = bottleneck if i == 3 else res[i]
        r_out = res[i - 1]
        per_iter += up_in * cout * 8 * r_in[0] * r_in[1] * r_in[2]
        per_iter += cout * r_out[0] * r_out[1] * r_out[2]  # up bias
        per_iter += conv_macs(cout + skip, cout, 3, r_out, bias=False)
        per_iter += conv_macs(cout, cout, 3, r_out, bias=False)
        per_iter += 2 * bn_macs(cout, r_out) + 2 * elem(cout, r_out)
    per_iter += conv_macs(c, 1, 1, res[0])  # latent head
    per_iter += elem(1, res[0])  # this latent's multiply inside the fusion conv
    base = elem(1, res[0])  # fusion bias
    return base + cfg.T * per_iter
