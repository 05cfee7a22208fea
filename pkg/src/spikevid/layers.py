"""Composite linear layers and normalization.

Feature maps travel as [T, B, C, H, W]; token form as [T, B, N, C]. Plain
batch normalization pools statistics over all time steps per channel; the
time-dependent variant (TDBN) computes statistics independently per
(time step, channel) pair so no step ever sees information from later steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Module
from .neurons import NeuronConfig, SpikingLayer

PLAIN_BN = "plain"
TDBN = "tdbn"
NORM_MODES = (PLAIN_BN, TDBN)


def trunc_normal(rng: np.random.Generator, shape, std=0.02):
    vals = rng.standard_normal(shape) * std
    return np.clip(vals, -2 * std, 2 * std).astype(ad.current_dtype())


def batch_stats_normalize(x, reduce_axes, gamma, beta, eps, running, mode, momentum=0.1):
    """Normalize over ``reduce_axes``; affine over the remaining axes.

    ``running`` is a dict with "mean"/"var" ndarrays matching gamma's shape;
    train mode uses batch statistics and updates them in place, eval mode uses
    them frozen.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if mode == "train":
        mean = ad.reduce_mean(x, axes=reduce_axes, keepdims=True)
        diff = ad.sub(x, mean)
        var = ad.reduce_mean(ad.mul(diff, diff), axes=reduce_axes, keepdims=True)
        running["mean"] += momentum * (mean.data - running["mean"])
        running["var"] += momentum * (var.data - running["var"])
        inv = ad.div(ad.tensor(1.0), ad.sqrt(ad.add(var, ad.tensor(eps))))
        xhat = ad.mul(diff, inv)
    else:
        w = 1.0 / np.sqrt(running["var"] + eps)
        xhat = ad.mul(ad.sub(x, ad.tensor(running["mean"])), ad.tensor(w))
    return ad.add(ad.mul(xhat, gamma), beta)


class BatchNorm(Module):
    """Plain or time-dependent batch normalization over map or token layout."""

    def __init__(self, channels, norm_mode=PLAIN_BN, time_steps=1, layout="map",
                 eps=1e-5, momentum=0.1):
        super().__init__()
        if norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm mode {norm_mode!r}")
        self.channels = channels
        self.norm_mode = norm_mode
        self.time_steps = time_steps
        self.layout = layout
        self.eps = eps
        self.momentum = momentum
        t = time_steps if norm_mode == TDBN else 1
        if layout == "map":  # [T, B, C, H, W]
            shape = (t, 1, channels, 1, 1)
            self.reduce_axes = (1, 3, 4) if norm_mode == TDBN else (0, 1, 3, 4)
        elif layout == "token":  # [T, B, N, C]
            shape = (t, 1, 1, channels)
            self.reduce_axes = (1, 2) if norm_mode == TDBN else (0, 1, 2)
        elif layout == "vec":  # [B, C], after the temporal axis is consumed
            shape = (1, channels)
            self.reduce_axes = (0,)
        else:
            raise ValueError(f"unknown layout {layout!r}")
        dtype = ad.current_dtype()
        self.gamma = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(shape, dtype=dtype)
        self.running_var = np.ones(shape, dtype=dtype)

    def forward(self, x):
        if self.norm_mode == TDBN and self.layout != "vec" and x.shape[0] != self.time_steps:
            raise ad.ShapeError(
                f"TDBN configured for T={self.time_steps}, input has T={x.shape[0]}"
            )
        running = {"mean": self.running_mean, "var": self.running_var}
        return batch_stats_normalize(
            x, self.reduce_axes, self.gamma, self.beta, self.eps, running,
            "train" if self.training else "eval", self.momentum,
        )

    def frozen_scale_shift(self):
        """Per-(t?, c) multiplier and offset equivalent to eval-mode BN."""
        w = self.gamma.data / np.sqrt(self.running_var + self.eps)
        b = self.beta.data - self.running_mean * w
        return w, b


class _InputRecorder:
    """Mixin state for profiling the tensor a linear layer consumes."""

    def _init_recorder(self):
        self.record_input = False
        self.expects_binary = True
        self.is_encoder = False  # first layer: consumes raw frames, billed at MAC cost
        self._fr_source = None  # spiking layer whose rate drives this layer's SOPs
        self.input_nnz = 0
        self.input_size = 0
        self.out_count = 0
        self.input_binary = True

    def _record(self, x: Tensor):
        if not self.record_input:
            return
        data = x.data
        self.input_nnz += int(np.count_nonzero(data))
        self.input_size += data.size
        if self.input_binary:
            self.input_binary = bool(np.all((data == 0) | (data == 1)))

    def clear_records(self):
        self.input_nnz = 0
        self.input_size = 0
        self.out_count = 0
        self.input_binary = True

    def input_rate(self):
        return self.input_nnz / self.input_size if self.input_size else 0.0

    @property
    def fr_source(self):
        # held privately so module traversal does not treat the alias as a child
        return self._fr_source

    @fr_source.setter
    def fr_source(self, layer):
        self._fr_source = layer


class Conv(Module, _InputRecorder):
    """Grouped 2-D/3-D cross-correlation with learnable kernel."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 groups=1, bias=False, spatial_rank=2):
        super().__init__()
        self._init_recorder()
        kernel = (kernel,) * spatial_rank if isinstance(kernel, int) else tuple(kernel)
        if in_channels % groups or out_channels % groups:
            raise ad.ShapeError(
                f"groups={groups} incompatible with channels {in_channels}->{out_channels}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Tensor(
            trunc_normal(rng, (out_channels, in_channels // groups) + kernel),
            requires_grad=True,
        )
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=ad.current_dtype()), requires_grad=True)

    def forward(self, x):
        self._record(x)
        out = ad.conv(x, self.weight, stride=self.stride, padding=self.padding,
                      groups=self.groups, bias=self.bias)
        if self.record_input:
            self.out_count += out.data.size
        return out

    def macs_per_output(self):
        return math.prod(self.kernel) * (self.in_channels // self.groups)


class Linear(Module, _InputRecorder):
    def __init__(self, in_features, out_features, rng, bias=False):
        super().__init__()
        self._init_recorder()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features)), requires_grad=True)
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=ad.current_dtype()), requires_grad=True)

    def forward(self, x):
        self._record(x)
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        if self.record_input:
            self.out_count += out.data.size
        return out

    def macs_per_output(self):
        return self.in_features


class ConvBN(Module):
    """Convolution followed by batch normalization on [T, B, C, H, W] maps."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 groups=1, norm_mode=PLAIN_BN, time_steps=1):
        super().__init__()
        self.conv = Conv(in_channels, out_channels, kernel, rng, stride=stride,
                         padding=padding, groups=groups)
        self.bn = BatchNorm(out_channels, norm_mode=norm_mode, time_steps=time_steps,
                            layout="map")

    def forward(self, x):
        T, B = x.shape[0], x.shape[1]
        flat = ad.reshape(x, (T * B,) + x.shape[2:])
        out = self.conv(flat)
        out = ad.reshape(out, (T, B) + out.shape[1:])
        return self.bn(out)


class LinearBN(Module):
    """Token-wise linear map followed by batch normalization on [T, B, N, C]."""

    def __init__(self, in_features, out_features, rng, norm_mode=PLAIN_BN, time_steps=1):
        super().__init__()
        self.linear = Linear(in_features, out_features, rng)
        self.bn = BatchNorm(out_features, norm_mode=norm_mode, time_steps=time_steps,
                            layout="token")

    def forward(self, x):
        return self.bn(self.linear(x))


@dataclass
class PatchEmbedSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    has_input_neuron: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


class PatchEmbed(Module):
    """Stage entry: optional spiking layer, then strided ConvBN.

    The first patch-embedding module omits the input neuron so it consumes
    raw real-valued frames; all later ones spike first.
    """

    def __init__(self, spec: PatchEmbedSpec, rng, neuron_cfg: NeuronConfig,
                 norm_mode=PLAIN_BN, time_steps=1):
        super().__init__()
        self.spec = spec
        self.sn = SpikingLayer(neuron_cfg) if spec.has_input_neuron else None
        self.convbn = ConvBN(spec.in_channels, spec.out_channels, spec.kernel, rng,
                             stride=spec.stride, padding=spec.padding,
                             norm_mode=norm_mode, time_steps=time_steps)

    def forward(self, x):
        if self.sn is not None:
            x = self.sn(x)
        return self.convbn(x)


class FusedConv(Module, _InputRecorder):
    """Inference-only conv with normalization folded into the kernel.

    With TDBN the folded scale differs per time step, so the fused layer
    carries one kernel per step.
    """

    def __init__(self, weights, biases, stride, padding, groups):
        super().__init__()
        self.weights = weights  # list of ndarray [C_out, C_g, *k], one per step (or one shared)
        self.biases = biases
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self._init_recorder()

    def forward(self, x):
        self._record(x)
        T, B = x.shape[0], x.shape[1]
        if len(self.weights) == 1:
            flat = ad.reshape(x, (T * B,) + x.shape[2:])
            out = ad.conv(flat, ad.tensor(self.weights[0]), stride=self.stride,
                          padding=self.padding, groups=self.groups,
                          bias=ad.tensor(self.biases[0]))
            out = ad.reshape(out, (T, B) + out.shape[1:])
        else:
            outs = []
            for t in range(T):
                xt = ad.index(x, t, axis=0)
                outs.append(ad.conv(xt, ad.tensor(self.weights[t]), stride=self.stride,
                                    padding=self.padding, groups=self.groups,
                                    bias=ad.tensor(self.biases[t])))
            out = ad.stack(outs, axis=0)
        if self.record_input:
            self.out_count += out.data.size
        return out

    def macs_per_output(self):
        # billed at the pre-fusion accumulation structure
        return math.prod(self.weights[0].shape[2:]) * self.weights[0].shape[1]


class FusedLinear(Module, _InputRecorder):
    def __init__(self, weights, biases):
        super().__init__()
        self.weights = weights
        self.biases = biases
        self._init_recorder()

    def forward(self, x):
        self._record(x)
        if len(self.weights) == 1:
            out = ad.add(ad.matmul(x, ad.tensor(self.weights[0])), ad.tensor(self.biases[0]))
        else:
            outs = []
            for t in range(x.shape[0]):
                xt = ad.index(x, t, axis=0)
                outs.append(ad.add(ad.matmul(xt, ad.tensor(self.weights[t])),
                                   ad.tensor(self.biases[t])))
            out = ad.stack(outs, axis=0)
        if self.record_input:
            self.out_count += out.data.size
        return out

    def macs_per_output(self):
        return self.weights[0].shape[0]


def fuse_linear_layers(layer):
    """Fold eval-mode batch normalization into the preceding conv/linear.

    W' = gamma * W / sqrt(var + eps),  b' = gamma * (b - mean) / sqrt(var + eps) + beta.
    """
    if not isinstance(layer, (ConvBN, LinearBN)):
        raise TypeError(f"cannot fuse {type(layer).__name__}")
    if layer.training:
        raise RuntimeError("fusion requires eval mode with frozen statistics")
    w_scale, b_shift = layer.bn.frozen_scale_shift()
    if isinstance(layer, ConvBN):
        conv = layer.conv
        steps = w_scale.shape[0]
        weights, biases = [], []
        base_bias = conv.bias.data if conv.bias is not None else 0.0
        for t in range(steps):
            s = w_scale[t, 0, :, 0, 0]  # per out-channel
            shift = b_shift[t, 0, :, 0, 0]
            wk = conv.weight.data * s.reshape((-1,) + (1,) * (conv.weight.ndim - 1))
            weights.append(wk.astype(conv.weight.data.dtype))
            biases.append((base_bias * s + shift).astype(conv.weight.data.dtype))
        fused = FusedConv(weights, biases, conv.stride, conv.padding, conv.groups)
    elif isinstance(layer, LinearBN):
        lin = layer.linear
        steps = w_scale.shape[0]
        weights, biases = [], []
        base_bias = lin.bias.data if lin.bias is not None else 0.0
        for t in range(steps):
            s = w_scale[t, 0, 0, :]
            shift = b_shift[t, 0, 0, :]
            weights.append((lin.weight.data * s[None, :]).astype(lin.weight.data.dtype))
            biases.append((base_bias * s + shift).astype(lin.weight.data.dtype))
        fused = FusedLinear(weights, biases)
    inner = layer.conv if isinstance(layer, ConvBN) else layer.linear
    fused.expects_binary = inner.expects_binary
    fused.is_encoder = inner.is_encoder
    fused.fr_source = inner.fr_source
    fused.eval()
    return fused
