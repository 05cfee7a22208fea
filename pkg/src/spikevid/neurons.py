"""LIF and PLIF spiking neuron layers.

One step of membrane dynamics:

    H = V + kappa * (X - (V - V_reset))      kappa = 1/tau (LIF) or sigmoid(a) (PLIF)
    S = Heaviside(H - V_th)
    V' = H * (1 - S) + V_reset * S

The forward spike is exact binary; the backward pass substitutes the
derivative of a sigmoid of steepness ``surrogate_alpha`` at the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .module import Module


@dataclass
class NeuronConfig:
    kind: str = "PLIF"  # "LIF" | "PLIF"
    v_threshold: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    a_init: float = 0.0
    surrogate_alpha: float = 4.0
    detach_reset: bool = False

    def __post_init__(self):
        if self.kind not in ("LIF", "PLIF"):
            raise ValueError(f"unknown neuron kind {self.kind!r}")
        if self.kind == "LIF" and not self.tau > 1.0:
            raise ValueError(f"LIF requires tau > 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")
        if not self.surrogate_alpha > 0:
            raise ValueError("surrogate_alpha must be positive")


class SpikingLayer(Module):
    """Stateful neuron layer; the membrane potential persists across calls
    until ``reset_state``. One layer instance is driven by one thread.
    """

    def __init__(self, cfg: NeuronConfig, smooth=False):
        super().__init__()
        self.cfg = cfg
        self.smooth = smooth  # replace Heaviside by its sigmoid surrogate (grad checks)
        self._v = None  # membrane Tensor, shape of the feature map
        self.t = 0
        if cfg.kind == "PLIF":
            self.a = Tensor(np.array(cfg.a_init, dtype=ad.current_dtype()), requires_grad=True)
        # instrumentation (profiler attaches via these)
        self.record_spikes = False
        self.spike_sum = 0.0
        self.spike_count = 0
        self.step_rates = []

    def reset_state(self):
        self._v = None
        self.t = 0

    @property
    def v(self):
        """Current membrane potential (None until the first step)."""
        return self._v

    def _kappa(self):
        if self.cfg.kind == "PLIF":
            return ad.sigmoid(self.a)
        return None

    def step(self, x_t: Tensor) -> Tensor:
        """Advance one time step; returns the binary spike tensor."""
        if not np.all(np.isfinite(x_t.data)):
            raise FloatingPointError("spiking layer received non-finite input")
        cfg = self.cfg
        if self._v is None:
            self._v = ad.zeros(x_t.shape) if cfg.v_reset == 0 else ad.tensor(
                np.full(x_t.shape, cfg.v_reset, dtype=ad.current_dtype())
            )
        if self._v.shape != x_t.shape:
            raise ad.ShapeError(
                f"membrane shape {self._v.shape} does not match input {x_t.shape}"
            )
        drive = ad.sub(x_t, ad.sub(self._v, ad.tensor(cfg.v_reset)))
        if cfg.kind == "PLIF":
            h = ad.add(self._v, ad.mul(self._kappa(), drive))
        else:
            h = ad.add(self._v, ad.scale(drive, 1.0 / cfg.tau))
        s = ad.spike(h, cfg.v_threshold, cfg.surrogate_alpha, smooth=self.smooth)
        s_reset = s.detach() if cfg.detach_reset else s
        one_minus = ad.sub(ad.tensor(1.0), s_reset)
        self._v = ad.add(ad.mul(h, one_minus), ad.scale(s_reset, cfg.v_reset))
        self.t += 1
        if self.record_spikes:
            rate = float(s.data.mean())
            self.spike_sum += float(s.data.sum())
            self.spike_count += s.data.size
            self.step_rates.append(rate)
        return s

    def forward(self, x_seq: Tensor) -> Tensor:
        """Process a [T, ...] sequence step by step, carrying membrane state."""
        outs = [self.step(ad.index(x_seq, t, axis=0)) for t in range(x_seq.shape[0])]
        return ad.stack(outs, axis=0)

    def effective_tau(self) -> float:
        """Membrane time constant: learned 1/sigmoid(a) for PLIF, fixed for LIF."""
        if self.cfg.kind == "PLIF":
            kappa = _sigmoid_scalar(float(self.a.data))
            # sigmoid underflow (a very negative) is the no-leak limit
            return float("inf") if kappa == 0.0 else 1.0 / kappa
        return self.cfg.tau

    def firing_rate(self) -> float:
        if self.spike_count == 0:
            return 0.0
        return self.spike_sum / self.spike_count

    def clear_records(self):
        self.spike_sum = 0.0
        self.spike_count = 0
        self.step_rates = []


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def neuron_step(v, x_t, cfg: NeuronConfig):
    """Single functional step of the membrane recurrence on plain ndarrays.

    Returns (spikes, v_next). This is the layer dynamics without any tape;
    useful for oracles and closed-form reasoning.
    """
    dtype = np.asarray(x_t).dtype
    v = np.asarray(v, dtype=dtype)
    x_t = np.asarray(x_t, dtype=dtype)
    if v.shape != x_t.shape:
        raise ad.ShapeError(f"shapes differ: {v.shape} vs {x_t.shape}")
    if cfg.kind == "PLIF":
        # same float path as the layer's sigmoid, so results match bit-for-bit
        kappa = ad._sigmoid(np.asarray([cfg.a_init], dtype=dtype))[0]
    else:
        kappa = dtype.type(1.0 / cfg.tau)
    h = v + kappa * (x_t - (v - dtype.type(cfg.v_reset)))
    s = (h >= cfg.v_threshold).astype(dtype)
    v_next = h * (1 - s) + dtype.type(cfg.v_reset) * s
    return s, v_next


def plif_a_for_tau(tau: float) -> float:
    """The PLIF parameter at which k(a) = 1/tau, i.e. a = -ln(tau - 1)."""
    return -math.log(tau - 1.0)
