"""Synaptic-operation and energy accounting.

A layer's dense MAC count (its FLOPs) is converted to an estimated
accumulate count via the driving spike tensor's firing rate:

    SOP = fr_in * FLOP

Total energy bills every spike-driven layer at the per-accumulate cost and
the first (frame-encoding) convolution at the per-MAC cost. Exact
accumulate-event counters are provided to audit the estimate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import SpikingSelfAttention
from .layers import Conv, FusedConv, FusedLinear, Linear
from .model import VideoSpikeNet
from .training import iterate_batches

PJ_PER_MJ = 1e9


@dataclass
class EnergyModel:
    e_mac: float = 4.6  # pJ per multiply-accumulate (45 nm process)
    e_ac: float = 0.9  # pJ per accumulate

    def __post_init__(self):
        if self.e_mac <= 0 or self.e_ac <= 0:
            raise ValueError("per-operation energies must be positive")


@dataclass
class LayerCost:
    name: str
    kind: str  # conv | linear | ssa_matmul
    flops: float  # dense MAC count
    fr_in: float  # firing rate of the driving spike tensor
    sops: float = 0.0
    exact_acs: float | None = None
    mac_billed: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fr_in <= 1.0:
            raise ValueError(f"firing rate {self.fr_in} outside [0, 1] for {self.name}")


def count_flops(layer, out_elems=None):
    """Dense MAC count for a conv/linear layer given its recorded output size."""
    if out_elems is None:
        out_elems = layer.out_count
    return float(out_elems) * layer.macs_per_output()


def estimate_sops(table):
    """Populate every entry's SOP field as fr_in * FLOP."""
    for cost in table:
        cost.sops = cost.fr_in * cost.flops
    return table


# ---------------------------------------------------------------------------
# exact accumulate counters (diagnostic oracles for the estimate)


def _require_binary(arr, what):
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what}: operand is not binary")
    return arr


def exact_ac_count_linear(x, out_features):
    """AC events of a linear map on a binary input: one per input 1 per output."""
    x = _require_binary(x, "exact_ac_count_linear")
    return float(x.sum()) * out_features


def exact_ac_count_conv(x, kernel, stride, padding, groups, out_channels):
    """AC events of a conv on a binary input [B, C, *spatial]: for each output
    position, the number of ones in its receptive field.
    """
    x = _require_binary(x, "exact_ac_count_conv")
    rank = x.ndim - 2
    kernel = (kernel,) * rank if isinstance(kernel, int) else tuple(kernel)
    c_in = x.shape[1]
    ones = np.ones((groups, c_in // groups) + kernel, dtype=x.dtype)
    with ad.no_grad():
        # one output channel per group counts the ones in that group's field
        field_nnz = ad.conv(ad.tensor(x), ad.tensor(ones), stride=stride,
                            padding=padding, groups=groups).data
    return float(field_nnz.sum(dtype=np.float64)) * (out_channels // groups)


def exact_ac_count_matmul(a, b):
    """AC events of A^T @ B for binary A [K, I] and B [K, J]: accumulations
    happen exactly where a row of A and the same row of B both carry ones.
    """
    a = _require_binary(a, "exact_ac_count_matmul")
    b = _require_binary(b, "exact_ac_count_matmul")
    if a.shape[:-1] != b.shape[:-1]:
        raise ad.ShapeError(f"contraction extents disagree: {a.shape} vs {b.shape}")
    return float((a.sum(axis=-1) * b.sum(axis=-1)).sum(dtype=np.float64))


# ---------------------------------------------------------------------------
# model instrumentation


def _linear_layers(model):
    return [
        (name, m) for name, m in model.modules()
        if isinstance(m, (Conv, Linear, FusedConv, FusedLinear))
    ]


def _set_recording(model, enabled):
    for _, m in _linear_layers(model):
        m.record_input = enabled
        m.clear_records()
    for _, layer in model.spiking_layers():
        layer.record_spikes = enabled
        layer.clear_records()
    for _, m in model.modules():
        if isinstance(m, SpikingSelfAttention):
            m.record_attn = enabled
            m.attn_events = []


def _run_recorded(model: VideoSpikeNet, clips, batch_size=16):
    model.eval()
    _set_recording(model, True)
    with ad.no_grad():
        for batch in iterate_batches(len(clips), batch_size):
            clip = np.ascontiguousarray(clips[batch].transpose(1, 0, 2, 3, 4))
            model.reset_states()
            model(ad.tensor(clip))
    model.reset_states()
    for _, m in _linear_layers(model):
        m.record_input = False
    for _, layer in model.spiking_layers():
        layer.record_spikes = False
    for _, m in model.modules():
        if isinstance(m, SpikingSelfAttention):
            m.record_attn = False


def record_firing_rates(model: VideoSpikeNet, clips, batch_size=16):
    """Average firing rate and per-step trace for every spiking layer."""
    _run_recorded(model, clips, batch_size)
    rates = {name: layer.firing_rate() for name, layer in model.spiking_layers()}
    traces = {name: list(layer.step_rates) for name, layer in model.spiking_layers()}
    return rates, traces


def audit_binarity(model: VideoSpikeNet, clips, batch_size=16):
    """Check that every spike-fed conv/linear layer saw only {0, 1} inputs.

    Returns the list of violating layer names (empty on a clean pass).
    """
    _run_recorded(model, clips, batch_size)
    return [
        name for name, m in _linear_layers(model)
        if m.expects_binary and not m.input_binary
    ]


def build_cost_table(model: VideoSpikeNet, clips, batch_size=16, exact=False):
    """Run the eval set through the model and assemble per-layer costs.

    All counts are normalized per clip (the paper's figures are per video).
    """
    num_clips = len(clips)
    _run_recorded(model, clips, batch_size)
    table = []
    for name, m in _linear_layers(model):
        if m.out_count == 0:
            continue
        flops = count_flops(m) / num_clips
        if m.fr_source is not None:
            fr = m.fr_source.firing_rate()
        else:
            fr = m.input_rate()
        kind = "conv" if isinstance(m, (Conv, FusedConv)) else "linear"
        table.append(LayerCost(name=name, kind=kind, flops=flops, fr_in=fr,
                               mac_billed=m.is_encoder))
    for name, m in model.modules():
        if not isinstance(m, SpikingSelfAttention) or not m.attn_events:
            continue
        flops_kv = flops_qkv = 0.0
        wsum_k = wsum_q = 0.0
        exact_kv = exact_qkv = 0.0
        for ev in m.attn_events:
            per = ev["time_steps"] * ev["batch"] * ev["tokens"] * ev["channels"] ** 2
            flops_kv += per
            flops_qkv += per
            wsum_k += ev["fr_k"] * per
            wsum_q += ev["fr_q"] * per
            exact_kv += ev["exact_ac_kv"]
            exact_qkv += ev["exact_ac_qkv"]
        table.append(LayerCost(
            name=f"{name}.kv", kind="ssa_matmul", flops=flops_kv / num_clips,
            fr_in=wsum_k / flops_kv, exact_acs=exact_kv / num_clips if exact else None,
        ))
        table.append(LayerCost(
            name=f"{name}.qkv", kind="ssa_matmul", flops=flops_qkv / num_clips,
            fr_in=wsum_q / flops_qkv, exact_acs=exact_qkv / num_clips if exact else None,
        ))
    return estimate_sops(table)


def total_energy(table, energy: EnergyModel | None = None):
    """Aggregate a cost table into the spiking and dense-counterpart energies."""
    energy = energy or EnergyModel()
    missing = [c.name for c in table if c.sops is None]
    if missing:
        raise ValueError(f"SOPs not populated for {missing}")
    flops_mac = sum(c.flops for c in table if c.mac_billed)
    sops_ac = sum(c.sops for c in table if not c.mac_billed)
    dense_flops = sum(c.flops for c in table)
    report = energy_from_totals(flops_mac, sops_ac, energy)
    report["ann_total_flops"] = dense_flops
    report["ann_energy_mJ"] = energy.e_mac * dense_flops / PJ_PER_MJ
    if report["ann_energy_mJ"] > 0:
        report["ratio"] = report["energy_mJ"] / report["ann_energy_mJ"]
    return report


def energy_from_totals(flops_mac, sops_ac, energy: EnergyModel | None = None):
    """The headline arithmetic: E = e_ac * SOPs + e_mac * first-layer FLOPs."""
    energy = energy or EnergyModel()
    pj = energy.e_ac * sops_ac + energy.e_mac * flops_mac
    return {
        "total_flops_mac": flops_mac,
        "total_sops": sops_ac,
        "energy_pJ": pj,
        "energy_mJ": pj / PJ_PER_MJ,
    }


def write_profile(table, summary, out_dir):
    """CSV per-layer table plus a JSON aggregate summary."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "layer_costs.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "kind", "flops", "fr", "sops", "exact_acs", "energy_pJ"])
        energy = EnergyModel()
        for c in table:
            pj = c.flops * energy.e_mac if c.mac_billed else c.sops * energy.e_ac
            writer.writerow([
                c.name, c.kind, f"{c.flops:.0f}", f"{c.fr_in:.6f}", f"{c.sops:.1f}",
                "" if c.exact_acs is None else f"{c.exact_acs:.0f}", f"{pj:.1f}",
            ])
    json_path = os.path.join(out_dir, "energy_summary.json")
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return csv_path, json_path
