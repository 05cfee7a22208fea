"""Full network assembly, named size variants, and checkpointing.

The backbone is hierarchical: each stage opens with a patch-embedding module
(stride-2 ConvBN, spiking input except the very first) followed by local
feature extractors in the early stages and global self-attention blocks in
the late ones. A local pathway taps the third stage's embedding output and is
channel-concatenated with the last stage's output before the classification
head.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    BlockConfig,
    ClassificationHead,
    GlobalSelfAttention,
    LocalFeatureExtractor,
    LocalPathway,
)
from .layers import NORM_MODES, PLAIN_BN, TDBN, PatchEmbed, PatchEmbedSpec
from .module import Module
from .neurons import NeuronConfig, SpikingLayer


@dataclass
class ModelConfig:
    stage_depths: tuple = (1, 1, 2, 1)
    channels: tuple = (16, 32, 48, 64)
    time_steps: int = 8
    in_height: int = 32
    in_width: int = 32
    in_channels: int = 3
    num_classes: int = 8
    use_local_pathway: bool = True
    norm_mode: str = TDBN
    mlp_ratio: int = 2
    dw_kernel: int = 5
    attn_scale: float = 0.125
    pe_kernel: int = 3
    pe_stride: int = 2
    pe_padding: int = 1
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.channels = tuple(self.channels)
        if len(self.stage_depths) != len(self.channels):
            raise ValueError("stage_depths and channels must have equal length")
        if len(self.stage_depths) not in (3, 4):
            raise ValueError("3 or 4 stages supported")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("all stage depths must be >= 1")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm mode {self.norm_mode!r}")
        if len(self.stage_depths) == 3 and self.use_local_pathway:
            raise ValueError("the 3-stage layout has no local pathway")

    @property
    def num_stages(self):
        return len(self.stage_depths)

    @property
    def local_stages(self):
        return 2 if self.num_stages == 4 else 1

    def spatial_after(self, stage):
        h, w = self.in_height, self.in_width
        for _ in range(stage):
            h = (h + 2 * self.pe_padding - self.pe_kernel) // self.pe_stride + 1
            w = (w + 2 * self.pe_padding - self.pe_kernel) // self.pe_stride + 1
        return h, w

    def to_dict(self):
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        neuron = d.pop("neuron", {})
        if isinstance(neuron, dict):
            neuron = NeuronConfig(**neuron)
        return cls(neuron=neuron, **d)

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


# paper-scale named variants (224x224 inputs, 101 classes, 16 steps) plus the
# desk-scale default used throughout the tests
VARIANTS = {
    "base": dict(stage_depths=(1, 1, 3, 1), channels=(128, 256, 384, 512)),
    "ss": dict(stage_depths=(1, 1, 2, 1), channels=(128, 256, 384, 512)),
    "st": dict(stage_depths=(1, 1, 3, 1), channels=(64, 128, 256, 512)),
    "dp": dict(stage_depths=(1, 2, 4, 2), channels=(128, 256, 384, 512)),
    "wd": dict(stage_depths=(1, 1, 3, 1), channels=(128, 256, 512, 768)),
    "3stg": dict(stage_depths=(1, 2, 1), channels=(64, 128, 256),
                 use_local_pathway=False, in_height=128, in_width=128,
                 num_classes=11),
}


def variant_config(name, **overrides):
    if name == "tiny":
        return replace(ModelConfig(), **overrides)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS) + ['tiny']}")
    base = dict(time_steps=16, in_height=224, in_width=224, num_classes=101)
    base.update(VARIANTS[name])
    base.update(overrides)
    return ModelConfig(**base)


class VideoSpikeNet(Module):
    """The assembled network. One instance runs one forward/backward at a time."""

    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        T = cfg.time_steps

        def block_cfg(channels):
            return BlockConfig(channels=channels, mlp_ratio=cfg.mlp_ratio,
                               dw_kernel=cfg.dw_kernel, attn_scale=cfg.attn_scale,
                               norm_mode=cfg.norm_mode, time_steps=T, neuron=cfg.neuron)

        self.patch_embeds = []
        self.stages = []
        in_c = cfg.in_channels
        for i, (depth, out_c) in enumerate(zip(cfg.stage_depths, cfg.channels)):
            spec = PatchEmbedSpec(in_c, out_c, kernel=cfg.pe_kernel, stride=cfg.pe_stride,
                                  padding=cfg.pe_padding, has_input_neuron=(i > 0))
            pe = PatchEmbed(spec, rng, cfg.neuron, norm_mode=cfg.norm_mode, time_steps=T)
            if i == 0:
                pe.convbn.conv.expects_binary = False
                pe.convbn.conv.is_encoder = True
            self.patch_embeds.append(pe)
            if i < cfg.local_stages:
                blocks = [LocalFeatureExtractor(block_cfg(out_c), rng) for _ in range(depth)]
            else:
                blocks = [GlobalSelfAttention(block_cfg(out_c), rng) for _ in range(depth)]
            self.stages.append(blocks)
            in_c = out_c

        final_c = cfg.channels[-1]
        self.local_pathway = None
        head_c = final_c
        if cfg.use_local_pathway:
            # taps the third patch-embedding output (stage index 2)
            self.local_pathway = LocalPathway(
                cfg.channels[2], final_c, rng, cfg.neuron, norm_mode=cfg.norm_mode,
                time_steps=T, dw_kernel=cfg.dw_kernel, stride=cfg.pe_stride,
            )
            head_c = 2 * final_c
        h_out, w_out = cfg.spatial_after(cfg.num_stages)
        if h_out < 1 or w_out < 1:
            raise ValueError("input extent too small for the configured strides")
        self.head = ClassificationHead(head_c, cfg.num_classes, T, h_out, w_out,
                                       rng, cfg.neuron)
        self._ready = False

    # -- state management ----------------------------------------------------

    def spiking_layers(self):
        return [(name, m) for name, m in self.modules() if isinstance(m, SpikingLayer)]

    def reset_states(self):
        for _, layer in self.spiking_layers():
            layer.reset_state()
        self._ready = True

    def forward(self, clip):
        """clip: [T, B, 3, H, W] -> logits [B, num_classes]."""
        if not isinstance(clip, Tensor):
            clip = ad.tensor(clip)
        cfg = self.cfg
        expected = (cfg.time_steps, clip.shape[1], cfg.in_channels, cfg.in_height, cfg.in_width)
        if clip.shape != expected:
            raise ad.ShapeError(f"clip shape {clip.shape}, expected {expected}")
        if not self._ready:
            raise RuntimeError("neuron states not reset; call reset_states() before each clip")
        self._ready = False

        x = clip
        lp_input = None
        for i, (pe, blocks) in enumerate(zip(self.patch_embeds, self.stages)):
            x = pe(x)
            if i == 2 and self.local_pathway is not None:
                lp_input = x
            for block in blocks:
                x = block(x)
        if self.local_pathway is not None:
            x = ad.concat([x, self.local_pathway(lp_input)], axis=2)
        return self.head(x)


def build_model(cfg: ModelConfig, seed=0) -> VideoSpikeNet:
    return VideoSpikeNet(cfg, seed=seed)


def count_parameters(model: VideoSpikeNet) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"SVCKPT01"
_VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


def save_checkpoint(model: VideoSpikeNet, path):
    entries = []
    for name, p in model.named_parameters():
        entries.append((name, p.data))
    for name, b in model.named_buffers():
        entries.append((name, b))

    body = bytearray()
    body += struct.pack("<I", _VERSION)
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    body += struct.pack("<I", len(cfg_json)) + cfg_json
    body += model.cfg.digest().encode()
    body += struct.pack("<I", model.seed)
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        nb = name.encode()
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        body += struct.pack("<H", len(nb)) + nb
        body += dt.encode().ljust(4)
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        raw = arr.astype(dt).tobytes()
        body += struct.pack("<Q", len(raw)) + raw
    checksum = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", checksum))


class CheckpointError(RuntimeError):
    pass


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (checksum,) = blob[len(_MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != checksum:
        raise CheckpointError("checkpoint corrupt (checksum mismatch)")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise CheckpointError("checkpoint truncated")
        chunk = body[off:off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len).decode()))
    digest = take(64).decode()
    if digest != cfg.digest():
        raise CheckpointError("config digest mismatch")
    (seed,) = struct.unpack("<I", take(4))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        dt = take(4).decode().strip()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        (raw_len,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(raw_len), dtype=dt).reshape(shape).copy()
        arrays[name] = arr
    return cfg, seed, arrays


def load_checkpoint(path, model: VideoSpikeNet | None = None) -> VideoSpikeNet:
    """Rebuild (or populate) a model from a checkpoint, bit-exactly."""
    cfg, seed, arrays = _read_checkpoint(path)
    if model is None:
        model = VideoSpikeNet(cfg, seed=seed)
    slots = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {name: tuple(t.data.shape) for name, t in slots.items()}
    expected.update({name: tuple(b.shape) for name, b in buffers.items()})
    got = {name: tuple(a.shape) for name, a in arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        mismatched = sorted(
            n for n in set(expected) & set(got) if expected[n] != got[n]
        )
        raise CheckpointError(
            "checkpoint does not match model: "
            f"missing={missing} extra={extra} shape_mismatch={mismatched}"
        )
    for name, arr in arrays.items():
        if name in slots:
            slots[name].data = arr.astype(slots[name].data.dtype)
        else:
            np.copyto(buffers[name], arr.astype(buffers[name].dtype))
    return model
