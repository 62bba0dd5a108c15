"""Activation scores, dormant/active classification and masked resets.

A module is one hidden layer; a neuron is one of its output features. Its
incoming parameters are the slices that produce it (a weight column and a
bias entry for a dense layer, a column of A for an adapter) and its outgoing
parameters are the slices that consume it (a row of the next weight, a row of
B).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamW, InitSpec, Tensor

STRATEGIES = ("active", "dormant", "all")


def activation_scores(activations) -> np.ndarray:
    """Mean |activation| per neuron divided by its module-wide average.

    ``activations`` has shape (probe batch, neurons). All-zero activations
    give all-zero scores.
    """
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] == 0:
        raise ValueError("need a non-empty (batch, neurons) activation matrix")
    mean_abs = np.abs(acts).mean(axis=0)
    denom = mean_abs.mean()
    if denom == 0:
        return np.zeros_like(mean_abs)
    return mean_abs / denom


def classify(scores, tau: float = 0.0) -> np.ndarray:
    """True for active neurons (score > tau)."""
    if tau < 0:
        raise ValueError("threshold must be non-negative")
    return np.asarray(scores) > tau


def build_mask(scores) -> np.ndarray:
    return np.asarray(scores) > 0


def dormant_percentage(active) -> float:
    active = np.asarray(active, dtype=bool)
    if active.size == 0:
        raise ValueError("no neurons")
    return 100.0 * float(np.count_nonzero(~active)) / active.size


def overlap_percentage(previous, current) -> float | None:
    """100 * |prev & curr| / |prev|; 100 for two empty sets, None when only prev is empty."""
    prev, curr = set(previous), set(current)
    if not prev:
        return 100.0 if not curr else None
    return 100.0 * len(prev & curr) / len(prev)


@dataclass
class NeuronReport:
    module: str
    scores: np.ndarray
    tau: float
    active: np.ndarray
    degenerate: bool
    probe_size: int

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def dormant(self) -> set[int]:
        return set(np.flatnonzero(~self.active).tolist())

    @property
    def dormant_pct(self) -> float:
        return dormant_percentage(self.active)


def neuron_report(module: str, activations, tau: float = 0.0) -> NeuronReport:
    acts = np.asarray(activations)
    scores = activation_scores(acts)
    degenerate = not np.any(scores)
    return NeuronReport(module, scores, tau, classify(scores, tau), degenerate, acts.shape[0])


def network_dormant_stats(reports: Sequence[NeuronReport], previous: Sequence[NeuronReport] | None = None):
    """Pooled dormant percentage and overlap against ``previous`` over all modules."""
    total = sum(r.n for r in reports)
    dormant_now = {(r.module, i) for r in reports for i in r.dormant}
    pct = 100.0 * len(dormant_now) / total if total else float("nan")
    overlap = None
    if previous is not None:
        dormant_prev = {(r.module, i) for r in previous for i in r.dormant}
        overlap = overlap_percentage(dormant_prev, dormant_now)
    return pct, overlap


@dataclass
class ParamSlice:
    """One parameter tensor plus the axis along which neuron n selects a slice."""

    tensor: Tensor
    axis: int
    init: InitSpec


@dataclass
class NeuronModule:
    name: str
    size: int
    incoming: list[ParamSlice]
    outgoing: list[ParamSlice]


@dataclass
class ResetEvent:
    epoch: int
    target: str
    strategy: str
    masks: dict[str, np.ndarray]
    counts: dict[str, int]
    stream: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def select_neurons(report: NeuronReport, strategy: str) -> np.ndarray:
    """Neurons to redraw: the score>0 mask, its complement at the report threshold, or all."""
    if strategy == "active":
        return build_mask(report.scores)
    if strategy == "dormant":
        return ~report.active
    if strategy == "all":
        return np.ones(report.n, dtype=bool)
    raise ValueError(f"unknown reset strategy {strategy!r}")


def reset_parameters(modules: Sequence[NeuronModule], masks: dict[str, np.ndarray], rng: np.random.Generator,
                     optimizer: AdamW | None = None, *, epoch: int = -1, target: str = "critic",
                     strategy: str = "active", stream: str = "") -> ResetEvent:
    """Redraw incoming and outgoing slices of every masked neuron from its InitSpec.

    Matching optimizer moments are zeroed; everything else is left untouched.
    """
    counts = {}
    for module in modules:
        if module.name not in masks:
            continue
        mask = np.asarray(masks[module.name], dtype=bool)
        if mask.shape != (module.size,):
            raise ValueError(f"mask for {module.name} has shape {mask.shape}, expected ({module.size},)")
        idx = np.flatnonzero(mask)
        counts[module.name] = int(idx.size)
        if idx.size == 0:
            continue
        for ps in module.incoming + module.outgoing:
            if ps.init is None:
                raise ValueError(f"missing InitSpec for {ps.tensor.name}")
            data = ps.tensor.data
            view = np.moveaxis(data, ps.axis, 0)
            fresh = ps.init.sample((idx.size,) + view.shape[1:], rng)
            view[idx] = fresh
            if optimizer is not None:
                for state in optimizer.state_for(ps.tensor):
                    np.moveaxis(state, ps.axis, 0)[idx] = 0.0
    return ResetEvent(epoch, target, strategy, {k: np.asarray(v, dtype=bool) for k, v in masks.items()},
                      counts, stream)


def critic_modules(critic) -> list[NeuronModule]:
    """Hidden layers of a critic head as resettable modules."""
    mods = []
    layers = critic.layers
    for i in range(len(layers) - 1):
        inc, out = layers[i], layers[i + 1]
        mods.append(NeuronModule(
            name=inc.name, size=inc.n_out,
            incoming=[ParamSlice(inc.weight, 1, inc.weight_init), ParamSlice(inc.bias, 0, inc.bias_init)],
            outgoing=[ParamSlice(out.weight, 0, out.weight_init)]))
    return mods


def adapter_modules(denoiser) -> list[NeuronModule]:
    """Adapter bottlenecks of a denoiser as resettable modules."""
    mods = []
    for i, ad in sorted(denoiser.adapters.items()):
        mods.append(NeuronModule(
            name=f"hidden{i}.lora", size=ad.rank,
            incoming=[ParamSlice(ad.A, 1, ad.a_init)],
            outgoing=[ParamSlice(ad.B, 0, ad.b_init)]))
    return mods


def append_event(path, event: ResetEvent, *, dormant_pct_before: float, dormant_pct_after: float,
                 overlap_pct: float | None) -> None:
    record = {
        "epoch": event.epoch,
        "target": event.target,
        "strategy": event.strategy,
        "counts": event.counts,
        "dormant_pct_before": dormant_pct_before,
        "dormant_pct_after": dormant_pct_after,
        "overlap_pct": overlap_pct,
    }
    with Path(path).open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
