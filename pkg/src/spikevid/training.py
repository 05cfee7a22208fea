"""Loss, optimizer, schedule, and the train/eval loops.

Training unrolls the network over the clip's time steps and backpropagates
through the whole unrolled graph; spike nodes use their surrogate derivative.
The optimizer is an adaptive-moment method with decoupled weight decay.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import VideoSpikeNet
from .neurons import SpikingLayer


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_epochs: int = 3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")


# the full-dataset profile reported alongside desk-scale defaults
PAPER_PROFILE = TrainConfig(epochs=600, batch_size=64, base_lr=0.006, warmup_epochs=20)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    top1: float
    lr: float
    firing_rates: dict = field(default_factory=dict)
    taus: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_record(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "top1": self.top1,
            "lr": self.lr,
            "firing_rates": self.firing_rates,
            "taus": self.taus,
            "wall_time": self.wall_time,
        }


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. ``labels`` are integer class indices."""
    labels = np.asarray(labels)
    B, n_cls = logits.shape
    if labels.shape != (B,):
        raise ad.ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"label out of range [0, {n_cls})")
    shift = ad.tensor(logits.data.max(axis=1, keepdims=True))  # constant, grad-free
    z = ad.sub(logits, shift)
    log_norm = ad.log(ad.reduce_sum(ad.exp(z), axes=(1,), keepdims=True))
    log_probs = ad.sub(z, log_norm)
    onehot = np.zeros((B, n_cls), dtype=logits.data.dtype)
    onehot[np.arange(B), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(log_probs, ad.tensor(onehot)))
    return ad.scale(picked, -1.0 / B)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            g = g.astype(np.float64)
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new = p.data.astype(np.float64)
            new -= lr * cfg.weight_decay * new
            new -= lr * update
            p.data = new.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = (max_norm / norm).__float__()
        for g in grads:
            g *= np.asarray(factor, dtype=g.dtype)
    return norm


def lr_at(step, steps_per_epoch, cfg: TrainConfig):
    """Linear warmup over the first warmup epochs, then half-cosine decay to 0."""
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def iterate_batches(num_items, batch_size, rng=None):
    order = np.arange(num_items)
    if rng is not None:
        rng.shuffle(order)
    for lo in range(0, num_items, batch_size):
        yield order[lo:lo + batch_size]


def train_epoch(model: VideoSpikeNet, clips, labels, cfg: TrainConfig,
                optimizer: AdamW, epoch, steps_per_epoch, rng) -> EpochMetrics:
    """One pass over the training set; returns loss/metrics for the epoch."""
    model.train()
    start = time.time()
    losses = []
    lr = cfg.base_lr
    for step_idx, batch in enumerate(iterate_batches(len(labels), cfg.batch_size, rng)):
        global_step = epoch * steps_per_epoch + step_idx
        lr = lr_at(global_step, steps_per_epoch, cfg)
        clip = np.ascontiguousarray(clips[batch].transpose(1, 0, 2, 3, 4))  # [T,B,3,H,W]
        model.reset_states()
        logits = model(ad.tensor(clip))
        loss = cross_entropy(logits, labels[batch])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(_divergence_report(model, loss_val))
        optimizer.zero_grad()
        ad.backward(loss)
        clip_gradients(optimizer.params, cfg.grad_clip)
        optimizer.step(lr)
        losses.append(loss_val)
    model.reset_states()
    fr = {}
    taus = {
        name: layer.effective_tau()
        for name, layer in model.spiking_layers()
    }
    return EpochMetrics(
        epoch=epoch,
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        top1=float("nan"),
        lr=float(lr),
        firing_rates=fr,
        taus=taus,
        wall_time=time.time() - start,
    )


def _divergence_report(model, loss_val):
    lines = [f"non-finite loss ({loss_val}); membrane-state norms by layer:"]
    for name, layer in model.spiking_layers():
        if layer.v is not None:
            lines.append(f"  {name}: |V| = {float(np.abs(layer.v.data).max()):.4g}")
    return "\n".join(lines)


def evaluate(model: VideoSpikeNet, clips, labels, batch_size=16,
             record_rates=False) -> float:
    """Top-1 accuracy over the dataset; eval mode, frozen statistics."""
    if len(labels) == 0:
        raise ValueError("empty dataset")
    model.eval()
    if record_rates:
        for _, layer in model.spiking_layers():
            layer.record_spikes = True
            layer.clear_records()
    correct = 0
    with ad.no_grad():
        for batch in iterate_batches(len(labels), batch_size):
            clip = np.ascontiguousarray(clips[batch].transpose(1, 0, 2, 3, 4))
            model.reset_states()
            logits = model(ad.tensor(clip))
            pred = logits.data.argmax(axis=1)
            correct += int((pred == labels[batch]).sum())
    model.reset_states()
    if record_rates:
        for _, layer in model.spiking_layers():
            layer.record_spikes = False
    return correct / len(labels)


def firing_rate_table(model: VideoSpikeNet):
    """Per-layer firing rates gathered during the last recorded eval pass."""
    return {
        name: layer.firing_rate()
        for name, layer in model.spiking_layers()
        if layer.spike_count
    }


def tau_table(model: VideoSpikeNet):
    return {name: layer.effective_tau() for name, layer in model.spiking_layers()}


def fit(model: VideoSpikeNet, train_clips, train_labels, cfg: TrainConfig,
        test_clips=None, test_labels=None, callback=None):
    """Full training run; returns the list of per-epoch metrics."""
    optimizer = AdamW(model.parameters(), cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    steps_per_epoch = int(np.ceil(len(train_labels) / cfg.batch_size))
    history = []
    for epoch in range(cfg.epochs):
        metrics = train_epoch(model, train_clips, train_labels, cfg, optimizer,
                              epoch, steps_per_epoch, rng)
        if test_clips is not None:
            metrics.top1 = evaluate(model, test_clips, test_labels, cfg.batch_size)
            model.train()
        history.append(metrics)
        if callback is not None:
            callback(metrics)
    model.eval()
    return history
