"""Epsilon gates that turn a residual branch into a strict identity.

The gate ``t_eps(v) = 1 - relu(1 - L * max_i relu(|v_i| - eps))`` is exactly
zero when every response is at most ``eps`` and exactly one once the largest
response clears ``eps + 1/L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, absolute, amax, relu

DEFAULT_SHARPNESS = 1e5
HIST_BINS = 64

ATTENTION_HEAD = "attention_head"
ATTENTION_LAYER = "attention_layer"
FFN = "ffn"
BLOCK_KINDS = (ATTENTION_HEAD, ATTENTION_LAYER, FFN)


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    eps_att: float = 0.0
    eps_ffn: float = 0.0
    sharpness: float = DEFAULT_SHARPNESS
    # "head" gates every attention head separately; "layer" gates the summed MHA output
    attention_granularity: str = "head"

    def __post_init__(self):
        if self.eps_att < 0 or self.eps_ffn < 0:
            raise ValueError("gate thresholds must be nonnegative")
        if self.sharpness <= 0:
            raise ValueError("gate sharpness L must be positive")
        if self.attention_granularity not in ("head", "layer"):
            raise ValueError(f"unknown attention granularity {self.attention_granularity!r}")


@dataclass(frozen=True, order=True)
class BlockId:
    layer: int
    kind: str
    head_index: int | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if (self.kind == ATTENTION_HEAD) != (self.head_index is not None):
            raise ValueError("head_index is required for attention heads and only for them")

    @property
    def label(self) -> str:
        if self.kind == ATTENTION_HEAD:
            return f"L{self.layer}.H{self.head_index}"
        if self.kind == ATTENTION_LAYER:
            return f"L{self.layer}.ATT"
        return f"L{self.layer}.FFN"

    def sort_key(self) -> tuple[int, int]:
        return (self.layer, -1 if self.head_index is None else self.head_index)


def t_epsilon(v: Tensor, eps: float, L: float = DEFAULT_SHARPNESS, axes: Sequence[int] | None = None) -> Tensor:
    """Gate value in [0, 1]. ``axes`` are reduced by the max; default is all of them."""
    if not isinstance(v, Tensor):
        v = Tensor(v)
    if axes is None:
        axes = tuple(range(v.ndim))
    peak = amax(relu(absolute(v) - eps), axes)
    return 1.0 - relu(1.0 - L * peak)


def s_epsilon(v: Tensor, eps: float, L: float = DEFAULT_SHARPNESS) -> Tensor:
    if not isinstance(v, Tensor):
        v = Tensor(v)
    return t_epsilon(v, eps, L) * v


@dataclass
class BlockStats:
    count: int = 0
    total: float = 0.0
    zero_count: int = 0
    values: list[float] = field(default_factory=list)

    @property
    def mean_maxabs(self) -> float:
        if self.count == 0:
            raise NoDataError("no activations recorded for this block")
        return self.total / self.count


class ActivationStats:
    """Per-block running statistics of the pre-gate max-abs response."""

    def __init__(self) -> None:
        self.blocks: dict[BlockId, BlockStats] = {}

    def __contains__(self, block: BlockId) -> bool:
        return block in self.blocks

    def __getitem__(self, block: BlockId) -> BlockStats:
        return self.blocks[block]

    def block_ids(self) -> list[BlockId]:
        return sorted(self.blocks, key=lambda b: (b.sort_key(), b.kind))

    def record(self, block: BlockId, maxabs: float, gated_zero: bool) -> None:
        record_activation(self, block, maxabs, gated_zero)

    def record_batch(self, block: BlockId, maxabs: Iterable[float], gated_zero: Iterable[bool]) -> None:
        for m, z in zip(maxabs, gated_zero):
            record_activation(self, block, float(m), bool(z))

    def merge(self, other: "ActivationStats") -> None:
        for block in other.block_ids():
            src = other.blocks[block]
            dst = self.blocks.setdefault(block, BlockStats())
            dst.count += src.count
            dst.total += src.total
            dst.zero_count += src.zero_count
            dst.values.extend(src.values)

    def mean_maxabs(self, block: BlockId) -> float:
        if block not in self.blocks:
            raise NoDataError(f"no activations recorded for {block.label}")
        return self.blocks[block].mean_maxabs

    def histogram(self, block: BlockId, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
        """Uniform bins over [0, observed max]; returns (counts, edges)."""
        values = np.asarray(self.blocks[block].values, dtype=np.float64)
        hi = float(values.max()) if values.size else 0.0
        if hi <= 0.0:
            hi = 1.0
        return np.histogram(values, bins=bins, range=(0.0, hi))

    def to_dict(self) -> dict:
        return {
            b.label: {
                "layer": b.layer, "kind": b.kind, "head_index": b.head_index,
                "count": s.count, "total": s.total, "zero_count": s.zero_count,
                "values": list(s.values),
            }
            for b, s in ((b, self.blocks[b]) for b in self.block_ids())
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ActivationStats":
        stats = cls()
        for entry in payload.values():
            block = BlockId(entry["layer"], entry["kind"], entry["head_index"])
            stats.blocks[block] = BlockStats(entry["count"], entry["total"],
                                             entry["zero_count"], list(entry["values"]))
        return stats


def record_activation(stats: ActivationStats, block: BlockId, maxabs: float, gated_zero: bool) -> ActivationStats:
    if maxabs < 0:
        raise ValueError("max-abs activation must be nonnegative")
    entry = stats.blocks.setdefault(block, BlockStats())
    entry.count += 1
    entry.total += maxabs
    entry.zero_count += int(bool(gated_zero))
    entry.values.append(maxabs)
    return stats


def identity_rate(stats: ActivationStats, block: BlockId) -> float:
    entry = stats.blocks.get(block)
    if entry is None or entry.count == 0:
        raise NoDataError(f"no activations recorded for {block.label}")
    return entry.zero_count / entry.count
