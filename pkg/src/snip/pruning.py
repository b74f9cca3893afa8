"""Greedy iterative structured pruning driven by epsilon gates.

One iteration: pick epsilon from the current activation means, train with the
gates and an L1 prior, count how often each block is a strict identity, remove
the blocks at or above the identity-rate threshold, then retrain the smaller
model from the surviving weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Graph, absolute, cross_entropy
from .data import Dataset, batch_iter
from .gates import ATTENTION_HEAD, ATTENTION_LAYER, FFN, ActivationStats, BlockId, GateConfig, identity_rate
from .model import (Architecture, ForwardOptions, ModelConfig, ModelParams, count_flops, count_params,
                    init_spectral_state, model_forward)
from .optim import Optimizer, OptimizerConfig
from .spectral import SpectralState, estimate_spectral_norm

log = logging.getLogger(__name__)

MODES = ("single_head_and_ffn", "attention_only", "ffn_only", "whole_attention_layer", "whole_layer")

_MODE_TABLE = {
    "single_head_and_ffn": ("head", (ATTENTION_HEAD, FFN)),
    "attention_only": ("head", (ATTENTION_HEAD,)),
    "ffn_only": ("head", (FFN,)),
    "whole_attention_layer": ("layer", (ATTENTION_LAYER,)),
    "whole_layer": ("layer", (ATTENTION_LAYER, FFN)),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    k: int = 1
    theta: float = 0.95
    mode: str = "single_head_and_ffn"
    max_iterations: int = 10
    accuracy_budget: float = 0.01
    l1_factor: float = 0.01
    baseline_epochs: int = 6
    train_epochs: int = 2
    retrain_epochs: int = 2
    batch_size: int = 32
    dropout: float = 0.1
    sharpness: float = 1e5
    trace_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("prune.k must be >= 1")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("prune.theta must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"prune.mode must be one of {MODES}")
        if self.max_iterations < 0:
            raise ValueError("prune.max_iterations must be >= 0")
        if not 0.0 <= self.accuracy_budget <= 1.0:
            raise ValueError("prune.accuracy_budget must lie in [0, 1]")
        if self.l1_factor < 0:
            raise ValueError("prune.l1_factor must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("prune.dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("prune.batch_size must be >= 1")

    @property
    def granularity(self) -> str:
        return _MODE_TABLE[self.mode][0]

    @property
    def target_kinds(self) -> tuple[str, ...]:
        return _MODE_TABLE[self.mode][1]


@dataclass
class PruneRecord:
    iteration: int
    eps_att: float
    eps_ffn: float
    pruned: list[str]
    params: int
    flops: int
    train_metric: float
    eval_metric: float
    architecture: dict
    identity_rates: dict[str, float] = field(default_factory=dict)
    mean_maxabs: dict[str, float] = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration, "eps_att": self.eps_att, "eps_ffn": self.eps_ffn,
            "pruned": list(self.pruned), "params": self.params, "flops": self.flops,
            "train_metric": self.train_metric, "eval_metric": self.eval_metric,
            "architecture": self.architecture, "identity_rates": dict(self.identity_rates),
            "mean_maxabs": dict(self.mean_maxabs), "note": self.note,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PruneRecord":
        return cls(**payload)


@dataclass
class PruneState:
    params: ModelParams
    train_set: Dataset
    eval_set: Dataset
    config: PruneConfig
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sn: SpectralState | None = None
    gate: GateConfig | None = None
    stats: ActivationStats = field(default_factory=ActivationStats)
    iteration: int = 0
    baseline_metric: float = math.nan
    history: list[PruneRecord] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    traces: list[tuple[int, int, str, float]] = field(default_factory=list)

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    @property
    def seq_len(self) -> int:
        # the prepended CLS position is part of every forward pass
        return self.train_set.seq_len + 1


# -- evaluation helpers ----------------------------------------------------------


def _eval_opts(state: PruneState) -> ForwardOptions:
    return ForwardOptions(sn=state.sn, sn_update=False)


def evaluate(state: PruneState, dataset: Dataset, gate: GateConfig | None = None,
             stats: ActivationStats | None = None, batch_size: int = 256) -> float:
    """Accuracy of the current model; no parameter or spectral-state updates."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        ids = dataset.ids[start:start + batch_size]
        logits = model_forward(ids, state.params, gate, stats, _eval_opts(state))
        correct += int((logits.data.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def profile(state: PruneState, dataset: Dataset) -> ActivationStats:
    """Ungated pass recording every block's per-example max-abs response."""
    stats = ActivationStats()
    evaluate(state, dataset, None, stats)
    return stats


def logits_for(state: PruneState, dataset: Dataset, gate: GateConfig | None) -> np.ndarray:
    return model_forward(dataset.ids, state.params, gate, None, _eval_opts(state)).data


def log_spectral_trace(state: PruneState, step: int | None = None) -> list[tuple[int, int, str, float]]:
    """Append (step, layer, matrix, sigma) rows for attention output and FFN weights.

    Sigma is that of the matrix the forward pass actually multiplies by, so with
    spectral normalization it tracks the target value.
    """
    step = state.step if step is None else step
    rows = []
    for i, layer in enumerate(state.arch.layers):
        names = []
        if layer.heads:
            names += [(f"layers.{i}.attn.wo", j, f"wo.h{h}") for j, h in enumerate(layer.heads)]
        if layer.ffn_alive:
            names += [(f"layers.{i}.ffn.w1", None, "w1"), (f"layers.{i}.ffn.w2", None, "w2")]
        for name, j, label in names:
            W = state.params[name].data
            scale = 1.0
            if state.sn is not None and name in state.sn.u:
                sig_hat = state.sn.effective_sigma(name, W)
                sig_hat = float(sig_hat if j is None else sig_hat[j])
                if sig_hat > 0 and (state.sn.mode == "rescale" or sig_hat > state.sn.target):
                    scale = state.sn.target / sig_hat
            M = W if j is None else W[j]
            rows.append((step, i, label, estimate_spectral_norm(M).sigma * scale))
    state.traces.extend(rows)
    return rows


# -- training --------------------------------------------------------------------


def _train(state: PruneState, epochs: int, gate: GateConfig | None, l1_factor: float,
            collect_stats: bool = False) -> ActivationStats:
    cfg = state.config
    steps_per_epoch = math.ceil(len(state.train_set) / cfg.batch_size)
    opt = Optimizer(state.params.trainable(), state.optimizer, epochs * steps_per_epoch)
    l1_scope = state.params.gated_weights()
    stats = ActivationStats()
    for e in range(epochs):
        record = stats if collect_stats and e == epochs - 1 else None
        rng = np.random.default_rng([cfg.seed, 1, state.epoch])
        opts = ForwardOptions(sn=state.sn, sn_update=True, dropout=cfg.dropout, rng=rng)
        for ids, labels in batch_iter(state.train_set, cfg.batch_size, cfg.seed, state.epoch):
            opt.zero_grad()
            with Graph() as graph:
                logits = model_forward(ids, state.params, gate, record, opts)
                loss = cross_entropy(logits, labels)
                if l1_factor > 0 and l1_scope:
                    penalty = absolute(l1_scope[0]).sum()
                    for w in l1_scope[1:]:
                        penalty = penalty + absolute(w).sum()
                    loss = loss + l1_factor * penalty
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss became {float(loss.data)} at step {state.step} "
                                       f"(iteration {state.iteration}, epoch {state.epoch})")
            graph.backward(loss)
            opt.step()
            state.step += 1
            if cfg.trace_every and state.step % cfg.trace_every == 0:
                log_spectral_trace(state)
        state.epoch += 1
    return stats


def train_plain(state: PruneState, epochs: int) -> PruneState:
    _train(state, epochs, None, 0.0)
    return state


def train_with_prior(state: PruneState, epochs: int) -> PruneState:
    """Train with the current gates plus the L1 prior; keeps final-epoch stats."""
    if state.gate is None:
        raise ValueError("train_with_prior needs a gate configuration; call estimate_epsilon first")
    state.stats = _train(state, epochs, state.gate, state.config.l1_factor, collect_stats=True)
    return state


# -- the four substeps ---------------------------------------------------------------


def estimate_epsilon(stats: ActivationStats, k: int, mode: str,
                     arch: Architecture | None = None) -> tuple[float, float] | None:
    """k-th smallest mean max-abs per targeted kind; None when nothing can be targeted.

    Kinds with fewer than ``k`` live blocks get epsilon 0 for this iteration.
    """
    granularity, kinds = _MODE_TABLE[mode]
    if arch is not None:
        live = set(arch.live_blocks(granularity))
        blocks = [b for b in stats.block_ids() if b in live]
    else:
        blocks = stats.block_ids()
    eps = {ATTENTION_HEAD: 0.0, ATTENTION_LAYER: 0.0, FFN: 0.0}
    any_target = False
    for kind in kinds:
        candidates = [b for b in blocks if b.kind == kind]
        if len(candidates) < k:
            continue
        ranked = sorted(candidates, key=lambda b: (stats.mean_maxabs(b), b.sort_key()))
        eps[kind] = stats.mean_maxabs(ranked[k - 1])
        any_target = True
    if not any_target:
        return None
    eps_att = eps[ATTENTION_LAYER] if granularity == "layer" else eps[ATTENTION_HEAD]
    return eps_att, eps[FFN]


def measure_usage(state: PruneState, dataset: Dataset) -> dict[BlockId, float]:
    """Identity rate per live block under the current gates, without updates."""
    if len(dataset) == 0:
        raise ValueError("cannot measure usage on an empty dataset")
    gate = state.gate or GateConfig(attention_granularity=state.config.granularity)
    stats = ActivationStats()
    evaluate(state, dataset, gate, stats)
    return {b: identity_rate(stats, b) for b in state.arch.live_blocks(gate.attention_granularity)}


def shrink_architecture(arch: Architecture, rates: dict[BlockId, float], theta: float,
                        mode: str) -> tuple[Architecture, list[BlockId]]:
    """Prune every targeted block whose identity rate is at least ``theta``."""
    granularity, kinds = _MODE_TABLE[mode]
    live = arch.live_blocks(granularity)
    missing = [b.label for b in live if b not in rates]
    if missing:
        raise ValueError(f"no identity rate for live blocks {missing}")
    qualifies = {b for b in live if b.kind in kinds and rates[b] >= theta}
    pruned: list[BlockId] = []
    if mode == "whole_layer":
        for i, layer in enumerate(arch.layers):
            subs = [b for b in live if b.layer == i]
            if subs and all(b in qualifies for b in subs):
                pruned.extend(subs)
    else:
        pruned = [b for b in live if b in qualifies]
    new = arch.copy()
    for b in pruned:
        layer = new.layers[b.layer]
        if b.kind == ATTENTION_HEAD:
            layer.heads = tuple(h for h in layer.heads if h != b.head_index)
        elif b.kind == ATTENTION_LAYER:
            layer.heads = ()
        else:
            layer.ffn_alive = False
    return new, pruned


def _record(state: PruneState, eps: tuple[float, float], pruned: list[BlockId],
            rates: dict[BlockId, float], means: ActivationStats | None, note: str) -> PruneRecord:
    cfg = state.params.config
    mean_map = {}
    if means is not None:
        mean_map = {b.label: means.mean_maxabs(b) for b in means.block_ids()}
    rec = PruneRecord(
        iteration=state.iteration,
        eps_att=float(eps[0]), eps_ffn=float(eps[1]),
        pruned=[b.label for b in pruned],
        params=count_params(cfg, state.arch),
        flops=count_flops(cfg, state.arch, state.seq_len),
        train_metric=evaluate(state, state.train_set),
        eval_metric=evaluate(state, state.eval_set),
        architecture=state.arch.to_dict(),
        identity_rates={b.label: r for b, r in sorted(rates.items(), key=lambda kv: (kv[0].sort_key(), kv[0].kind))},
        mean_maxabs=mean_map,
        note=note,
    )
    state.history.append(rec)
    return rec


def record_snapshot(state: PruneState, stats: ActivationStats | None = None, note: str = "") -> PruneRecord:
    """Record the current model without pruning (used for baselines and profiles)."""
    return _record(state, (0.0, 0.0), [], {}, stats, note)


def prune_iteration(state: PruneState) -> PruneState:
    cfg = state.config
    state.iteration += 1
    before = profile(state, state.train_set)
    eps = estimate_epsilon(before, cfg.k, cfg.mode, state.arch)
    if eps is None:
        state.gate = None
        _record(state, (0.0, 0.0), [], {}, before, "structural exhaustion")
        return state
    state.gate = GateConfig(eps[0], eps[1], cfg.sharpness, cfg.granularity)
    train_with_prior(state, cfg.train_epochs)
    rates = measure_usage(state, state.train_set)
    _, pruned = shrink_architecture(state.arch, rates, cfg.theta, cfg.mode)
    for block in pruned:
        state.params.remove_block(block, state.sn)
    state.gate = None
    train_plain(state, cfg.retrain_epochs)
    _record(state, eps, pruned, rates, before, "" if pruned else "null iteration")
    log.info("iteration %d: eps=(%.4g, %.4g) pruned %s -> %d params, eval %.4f",
             state.iteration, eps[0], eps[1], [b.label for b in pruned],
             state.history[-1].params, state.history[-1].eval_metric)
    return state


# -- driver ----------------------------------------------------------------------------


@dataclass
class ScheduleResult:
    history: list[PruneRecord]
    final: PruneState
    best_iteration: int
    best_params: ModelParams
    best_sn: SpectralState | None
    baseline_stats: ActivationStats
    traces: list[tuple[int, int, str, float]]
    stop_reason: str

    @property
    def baseline(self) -> PruneRecord:
        return self.history[0]

    @property
    def best(self) -> PruneRecord:
        return self.history[self.best_iteration]

    @property
    def pct_pruned(self) -> float:
        base = self.baseline.params
        return 0.0 if base == 0 else 1.0 - self.best.params / base


def _snapshot_sn(sn: SpectralState | None) -> SpectralState | None:
    if sn is None:
        return None
    return SpectralState(sn.target, sn.mode, {k: v.copy() for k, v in sn.u.items()},
                         {k: np.asarray(v).copy() for k, v in sn.sigma.items()})


def init_state(config: PruneConfig, model_config: ModelConfig, train_set: Dataset, eval_set: Dataset,
               optimizer: OptimizerConfig | None = None, sn_enabled: bool = True,
               sn_target: float = 5.0, sn_mode: str = "clip") -> PruneState:
    params = ModelParams.init(model_config, seed=config.seed)
    sn = init_spectral_state(params, sn_target, config.seed, sn_mode) if sn_enabled else None
    return PruneState(params=params, train_set=train_set, eval_set=eval_set, config=config,
                      optimizer=optimizer or OptimizerConfig(), sn=sn)


def run_schedule(config: PruneConfig, model_config: ModelConfig, train_set: Dataset, eval_set: Dataset,
                 optimizer: OptimizerConfig | None = None, sn_enabled: bool = True,
                 sn_target: float = 5.0, sn_mode: str = "clip",
                 state: PruneState | None = None) -> ScheduleResult:
    """Baseline training followed by prune iterations until a stop condition.

    Stops when the eval metric falls more than ``accuracy_budget`` below the
    baseline, after ``max_iterations``, or when no prunable block is left. The
    reported architecture is the last one within budget.
    """
    state = state or init_state(config, model_config, train_set, eval_set, optimizer, sn_enabled, sn_target, sn_mode)
    log_spectral_trace(state)
    train_plain(state, config.baseline_epochs)
    baseline_stats = profile(state, train_set)
    rec = _record(state, (0.0, 0.0), [], {}, baseline_stats, "baseline")
    state.baseline_metric = rec.eval_metric
    best_iteration, best_params, best_sn = 0, state.params.copy(), _snapshot_sn(state.sn)
    stop_reason = "max_iterations"
    for _ in range(config.max_iterations):
        if not [b for b in state.arch.live_blocks(config.granularity) if b.kind in config.target_kinds]:
            stop_reason = "structural exhaustion"
            break
        prune_iteration(state)
        rec = state.history[-1]
        if rec.note == "structural exhaustion":
            stop_reason = "structural exhaustion"
            break
        if rec.eval_metric < state.baseline_metric - config.accuracy_budget - 1e-12:
            stop_reason = "accuracy budget"
            break
        best_iteration, best_params, best_sn = len(state.history) - 1, state.params.copy(), _snapshot_sn(state.sn)
    return ScheduleResult(state.history, state, best_iteration, best_params, best_sn,
                          baseline_stats, state.traces, stop_reason)
