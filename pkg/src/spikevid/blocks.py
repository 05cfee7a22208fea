"""Network building blocks.

All blocks keep the [T, B, C, H, W] feature-map shape except the
classification head, which collapses time and space into class logits.
Residual connections carry real-valued (pre-spike) membrane features around
each block, so zero-initialized branch weights make every block the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .layers import PLAIN_BN, BatchNorm, Conv, Linear, LinearBN
from .module import Module
from .neurons import NeuronConfig, SpikingLayer


@dataclass
class BlockConfig:
    channels: int = 64
    mlp_ratio: int = 2
    dw_kernel: int = 5
    attn_scale: float = 0.125
    norm_mode: str = PLAIN_BN
    time_steps: int = 1
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.attn_scale <= 0:
            raise ValueError("attn_scale must be positive")
        if self.dw_kernel % 2 == 0:
            raise ValueError("dw_kernel must be odd")


def to_tokens(x):
    """[T, B, C, H, W] -> [T, B, H*W, C]"""
    T, B, C, H, W = x.shape
    return ad.reshape(ad.permute(x, (0, 1, 3, 4, 2)), (T, B, H * W, C))


def from_tokens(x, height, width):
    """[T, B, H*W, C] -> [T, B, C, H, W]"""
    T, B, N, C = x.shape
    return ad.permute(ad.reshape(x, (T, B, height, width, C)), (0, 1, 4, 2, 3))


def _flat_conv(conv, x):
    """Apply a per-frame conv to a [T, B, C, H, W] map."""
    T, B = x.shape[0], x.shape[1]
    out = conv(ad.reshape(x, (T * B,) + x.shape[2:]))
    return ad.reshape(out, (T, B) + out.shape[1:])


class Mlp(Module):
    """Two SN-Linear-BN motifs expanding C -> r*C -> C, token-wise."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        hidden = cfg.channels * cfg.mlp_ratio
        self.sn1 = SpikingLayer(cfg.neuron)
        self.fc1 = LinearBN(cfg.channels, hidden, rng, norm_mode=cfg.norm_mode,
                            time_steps=cfg.time_steps)
        self.sn2 = SpikingLayer(cfg.neuron)
        self.fc2 = LinearBN(hidden, cfg.channels, rng, norm_mode=cfg.norm_mode,
                            time_steps=cfg.time_steps)

    def forward(self, x):
        return self.fc2(self.sn2(self.fc1(self.sn1(x))))


class LocalFeatureExtractor(Module):
    """SN -> PWConv -> DWConv -> PWConv -> BN branch plus a token-wise MLP,
    both with membrane-shortcut residuals.
    """

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C = cfg.channels
        self.sn = SpikingLayer(cfg.neuron)
        self.pw1 = Conv(C, C, 1, rng)
        self.dw = Conv(C, C, cfg.dw_kernel, rng, padding=cfg.dw_kernel // 2, groups=C)
        self.pw2 = Conv(C, C, 1, rng)
        # interior of the cascade consumes real-valued maps, not spikes; the
        # entry SN is still the driving spike source for their SOP accounting
        self.dw.expects_binary = False
        self.pw2.expects_binary = False
        self.dw.fr_source = self.sn
        self.pw2.fr_source = self.sn
        self.bn = BatchNorm(C, norm_mode=cfg.norm_mode, time_steps=cfg.time_steps,
                            layout="map")
        self.mlp = Mlp(cfg, rng)

    def conv_branch(self, x):
        s = self.sn(x)
        out = _flat_conv(self.pw1, s)
        out = _flat_conv(self.dw, out)
        out = _flat_conv(self.pw2, out)
        return self.bn(out)

    def forward(self, x):
        mid = ad.add(x, self.conv_branch(x))
        H, W = mid.shape[3], mid.shape[4]
        return ad.add(mid, from_tokens(self.mlp(to_tokens(mid)), H, W))


class SpikingSelfAttention(Module):
    """Spike-form Q/K/V attention, evaluated right-to-left as Q @ (K^T @ V) * s.

    Both association orders are mathematically identical; the right-to-left
    order costs O(N * C^2) accumulations instead of O(N^2 * C).
    """

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        C = cfg.channels
        self.scale = cfg.attn_scale
        self.sn_in = SpikingLayer(cfg.neuron)
        self.q_proj = LinearBN(C, C, rng, norm_mode=cfg.norm_mode, time_steps=cfg.time_steps)
        self.k_proj = LinearBN(C, C, rng, norm_mode=cfg.norm_mode, time_steps=cfg.time_steps)
        self.v_proj = LinearBN(C, C, rng, norm_mode=cfg.norm_mode, time_steps=cfg.time_steps)
        self.sn_q = SpikingLayer(cfg.neuron)
        self.sn_k = SpikingLayer(cfg.neuron)
        self.sn_v = SpikingLayer(cfg.neuron)
        self.sn_attn = SpikingLayer(cfg.neuron)
        self.out_proj = LinearBN(C, C, rng, norm_mode=cfg.norm_mode, time_steps=cfg.time_steps)
        # profiling state
        self.record_attn = False
        self.attn_events = []  # dicts with token/channel counts, fr, exact ACs

    def forward(self, x):
        s_in = self.sn_in(x)
        q = self.sn_q(self.q_proj(s_in))
        k = self.sn_k(self.k_proj(s_in))
        v = self.sn_v(self.v_proj(s_in))
        kt = ad.permute(k, (0, 1, 3, 2))  # [T, B, C, N]
        kv = ad.matmul(kt, v)  # [T, B, C, C]
        attn = ad.scale(ad.matmul(q, kv), self.scale)  # [T, B, N, C]
        if self.record_attn:
            self.attn_events.append(_attn_event(q.data, k.data, v.data))
        return ad.add(x, self.out_proj(self.sn_attn(attn)))


def _attn_event(q, k, v):
    """Exact accumulate counts for the two attention matmuls on binary spikes.

    K^T @ V accumulates wherever a K bit and a V bit share a token; the outer
    product with real-valued K^T V is gated by Q bits alone.
    """
    T, B, N, C = q.shape
    k_rows = k.sum(axis=-1)  # [T, B, N] ones per token row
    v_rows = v.sum(axis=-1)
    exact_kv = float((k_rows * v_rows).sum())
    exact_qkv = float(q.sum()) * C
    return {
        "tokens": N,
        "channels": C,
        "time_steps": T,
        "batch": B,
        "fr_q": float(q.mean()),
        "fr_k": float(k.mean()),
        "fr_v": float(v.mean()),
        "nnz_q": int(q.sum()),
        "nnz_k": int(k.sum()),
        "nnz_v": int(v.sum()),
        "exact_ac_kv": exact_kv,
        "exact_ac_qkv": exact_qkv,
    }


class GlobalSelfAttention(Module):
    """Spiking self-attention followed by a residual MLP; shape preserving."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        self.ssa = SpikingSelfAttention(cfg, rng)
        self.mlp = Mlp(cfg, rng)

    def forward(self, x):
        H, W = x.shape[3], x.shape[4]
        tok = self.ssa(to_tokens(x))
        out = ad.add(tok, self.mlp(tok))
        return from_tokens(out, H, W)


class LocalPathway(Module):
    """SN -> DWConv -> PWConv -> BN tap from the third stage's input features,
    downsampling by the depthwise stride so its output matches the final
    stage's resolution and channel count.
    """

    def __init__(self, in_channels, out_channels, rng, neuron_cfg: NeuronConfig,
                 norm_mode=PLAIN_BN, time_steps=1, dw_kernel=5, stride=2):
        super().__init__()
        self.sn = SpikingLayer(neuron_cfg)
        self.dw = Conv(in_channels, in_channels, dw_kernel, rng, stride=stride,
                       padding=dw_kernel // 2, groups=in_channels)
        self.pw = Conv(in_channels, out_channels, 1, rng)
        self.pw.expects_binary = False
        self.pw.fr_source = self.sn
        self.bn = BatchNorm(out_channels, norm_mode=norm_mode, time_steps=time_steps,
                            layout="map")

    def forward(self, x):
        out = _flat_conv(self.dw, self.sn(x))
        out = _flat_conv(self.pw, out)
        return self.bn(out)


class ClassificationHead(Module):
    """Learnable weighted sum over time and space via a full-extent depthwise
    3-D convolution, then BN and a linear classifier.
    """

    def __init__(self, channels, num_classes, time_steps, height, width, rng,
                 neuron_cfg: NeuronConfig):
        super().__init__()
        self.channels = channels
        self.extent = (time_steps, height, width)
        self.sn = SpikingLayer(neuron_cfg)
        self.conv3d = Conv(channels, channels, self.extent, rng, groups=channels,
                           spatial_rank=3)
        self.bn = BatchNorm(channels, layout="vec")
        self.fc = Linear(channels, num_classes, rng, bias=True)
        self.fc.expects_binary = False
        self.fc.fr_source = self.sn

    def forward(self, x):
        if x.shape[0] != self.extent[0] or x.shape[3:] != self.extent[1:]:
            raise ad.ShapeError(
                f"head expects [T, B, C, H, W] extents {self.extent}, got {x.shape}"
            )
        s = self.sn(x)  # [T, B, C, H, W]
        y = ad.permute(s, (1, 2, 0, 3, 4))  # [B, C, T, H, W]
        y = self.conv3d(y)  # [B, C, 1, 1, 1]
        y = ad.reshape(y, (y.shape[0], self.channels))
        return self.fc(self.bn(y))
