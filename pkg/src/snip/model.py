"""Encoder Transformer with epsilon-gated residual branches.

Every attention layer keeps its heads stacked along a leading axis, so a layer
with ``H`` live heads stores ``wq`` as ``(H, d_model, d_k)`` and ``wo`` as
``(H, d_v, d_model)``. Removing a head deletes its slice; nothing is masked.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import DimensionError, Tensor, activation, embedding, layer_norm, matmul, softmax_rows, tanh
from .gates import ATTENTION_HEAD, ATTENTION_LAYER, FFN, ActivationStats, BlockId, GateConfig, t_epsilon
from .spectral import SpectralState

PAD_ID = 0
UNK_ID = 1

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
FFN_KEYS = ("w1", "b1", "w2", "b2")
SN_ATTN_KEYS = ("wq", "wk", "wv", "wo")
SN_FFN_KEYS = ("w1", "w2")


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 16
    num_heads: int = 4
    d_k: int = 4
    d_v: int = 4
    d_ffn: int = 32
    vocab_size: int = 32
    max_seq_len: int = 16
    num_classes: int = 2
    activation: str = "gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_k", "d_v", "d_ffn",
                     "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"model.activation must be relu or gelu, got {self.activation!r}")
        if self.ln_eps <= 0:
            raise ValueError("model.ln_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerArch:
    heads: tuple[int, ...]
    ffn_alive: bool = True

    @property
    def attention_alive(self) -> bool:
        return len(self.heads) > 0


@dataclass
class Architecture:
    layers: list[LayerArch] = field(default_factory=list)

    @classmethod
    def full(cls, config: ModelConfig) -> "Architecture":
        return cls([LayerArch(tuple(range(config.num_heads)), True) for _ in range(config.num_layers)])

    @classmethod
    def empty(cls, config: ModelConfig) -> "Architecture":
        return cls([LayerArch((), False) for _ in range(config.num_layers)])

    def copy(self) -> "Architecture":
        return Architecture([LayerArch(tuple(l.heads), l.ffn_alive) for l in self.layers])

    def validate(self, config: ModelConfig) -> None:
        if len(self.layers) != config.num_layers:
            raise ValueError(f"architecture has {len(self.layers)} layers, config {config.num_layers}")
        for i, layer in enumerate(self.layers):
            if list(layer.heads) != sorted(set(layer.heads)):
                raise ValueError(f"layer {i}: head indices must be sorted and unique")
            if any(h < 0 or h >= config.num_heads for h in layer.heads):
                raise ValueError(f"layer {i}: head index out of range")

    def live_blocks(self, attention_granularity: str = "head") -> list[BlockId]:
        blocks = []
        for i, layer in enumerate(self.layers):
            if attention_granularity == "head":
                blocks.extend(BlockId(i, ATTENTION_HEAD, h) for h in layer.heads)
            elif layer.attention_alive:
                blocks.append(BlockId(i, ATTENTION_LAYER))
            if layer.ffn_alive:
                blocks.append(BlockId(i, FFN))
        return blocks

    def is_empty(self) -> bool:
        return not any(l.attention_alive or l.ffn_alive for l in self.layers)

    def to_dict(self) -> dict:
        return {"layers": [{"heads": list(l.heads), "ffn_alive": l.ffn_alive} for l in self.layers]}

    @classmethod
    def from_dict(cls, payload: dict) -> "Architecture":
        return cls([LayerArch(tuple(int(h) for h in l["heads"]), bool(l["ffn_alive"]))
                    for l in payload["layers"]])


def _shapes(config: ModelConfig, arch: Architecture) -> dict[str, tuple[int, ...]]:
    d, dk, dv, dff = config.d_model, config.d_k, config.d_v, config.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        # one extra row for the prepended CLS token
        "embed.tok": (config.vocab_size + 1, d),
        "embed.pos": (config.max_seq_len + 1, d),
        "embed.ln.gain": (d,),
        "embed.ln.bias": (d,),
    }
    for i, layer in enumerate(arch.layers):
        h = len(layer.heads)
        if h:
            p = f"layers.{i}.attn."
            shapes.update({
                p + "wq": (h, d, dk), p + "bq": (h, dk),
                p + "wk": (h, d, dk), p + "bk": (h, dk),
                p + "wv": (h, d, dv), p + "bv": (h, dv),
                p + "wo": (h, dv, d), p + "bo": (d,),
            })
        shapes[f"layers.{i}.attn_ln.gain"] = (d,)
        shapes[f"layers.{i}.attn_ln.bias"] = (d,)
        if layer.ffn_alive:
            p = f"layers.{i}.ffn."
            shapes.update({p + "w1": (d, dff), p + "b1": (dff,), p + "w2": (dff, d), p + "b2": (d,)})
        shapes[f"layers.{i}.ffn_ln.gain"] = (d,)
        shapes[f"layers.{i}.ffn_ln.bias"] = (d,)
    shapes.update({"pooler.w": (d, d), "pooler.b": (d,),
                   "classifier.w": (d, config.num_classes), "classifier.b": (config.num_classes,)})
    return shapes


class ModelParams:
    """Named parameter tensors whose set is fixed by (config, architecture)."""

    def __init__(self, config: ModelConfig, arch: Architecture, tensors: dict[str, Tensor]):
        self.config = config
        self.arch = arch
        self.tensors = tensors
        self.check()

    @classmethod
    def init(cls, config: ModelConfig, arch: Architecture | None = None, seed: int = 0,
             init_scale: float = 1.0) -> "ModelParams":
        arch = arch or Architecture.full(config)
        arch.validate(config)
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _shapes(config, arch).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                data = np.ones(shape)
            elif leaf.startswith("b") or leaf == "bias":
                data = np.zeros(shape)
            elif name.startswith("embed."):
                data = rng.normal(0.0, 1.0, size=shape)
            else:
                fan_in = shape[-2]
                data = rng.normal(0.0, init_scale / math.sqrt(fan_in), size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, arch, tensors)

    def check(self) -> None:
        expected = _shapes(self.config, self.arch)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameters inconsistent with architecture: missing {missing}, orphan {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in self.names()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.arch.copy(),
                           {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()})

    def trainable(self) -> list[Tensor]:
        return [self.tensors[k] for k in self.names()]

    def gated_weights(self) -> list[Tensor]:
        """Weights and biases of attention and FFN branches (the L1 prior's scope)."""
        return [self.tensors[k] for k in self.names() if ".attn." in k or ".ffn." in k]

    def sn_names(self) -> list[str]:
        return [k for k in self.names()
                if (".attn." in k and k.rsplit(".", 1)[-1] in SN_ATTN_KEYS)
                or (".ffn." in k and k.rsplit(".", 1)[-1] in SN_FFN_KEYS)]

    def remove_head(self, layer: int, head: int, sn: SpectralState | None = None) -> None:
        heads = list(self.arch.layers[layer].heads)
        pos = heads.index(head)
        keep = np.array([i for i in range(len(heads)) if i != pos], dtype=int)
        heads.pop(pos)
        p = f"layers.{layer}.attn."
        if not heads:
            for key in ATTN_KEYS:
                del self.tensors[p + key]
                if sn is not None:
                    sn.drop(p + key)
        else:
            for key in ATTN_KEYS:
                if key == "bo":
                    continue
                t = self.tensors[p + key]
                self.tensors[p + key] = Tensor(t.data[keep].copy(), requires_grad=True, name=p + key)
                if sn is not None:
                    sn.select(p + key, keep)
        self.arch.layers[layer].heads = tuple(heads)
        self.check()

    def remove_attention(self, layer: int, sn: SpectralState | None = None) -> None:
        for head in list(self.arch.layers[layer].heads):
            self.remove_head(layer, head, sn)

    def remove_ffn(self, layer: int, sn: SpectralState | None = None) -> None:
        p = f"layers.{layer}.ffn."
        for key in FFN_KEYS:
            del self.tensors[p + key]
            if sn is not None:
                sn.drop(p + key)
        self.arch.layers[layer].ffn_alive = False
        self.check()

    def remove_block(self, block: BlockId, sn: SpectralState | None = None) -> None:
        if block.kind == ATTENTION_HEAD:
            self.remove_head(block.layer, block.head_index, sn)
        elif block.kind == ATTENTION_LAYER:
            self.remove_attention(block.layer, sn)
        else:
            self.remove_ffn(block.layer, sn)


def init_spectral_state(params: ModelParams, target: float, seed: int = 0, mode: str = "rescale") -> SpectralState:
    state = SpectralState(target=target, mode=mode)
    for i, name in enumerate(params.sn_names()):
        state.init_matrix(name, params[name].data, seed=seed + i)
    return state


@dataclass
class ForwardOptions:
    """Training-time knobs that do not change the function being computed at eval."""

    sn: SpectralState | None = None
    sn_update: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = None


def _weight(params: ModelParams, name: str, opts: ForwardOptions | None) -> Tensor:
    w = params[name]
    if opts is not None and opts.sn is not None and name in opts.sn.u:
        return opts.sn.normalized(name, w, update=opts.sn_update)
    return w


def _dropout(x: Tensor, opts: ForwardOptions | None) -> Tensor:
    if opts is None or opts.rng is None or opts.dropout <= 0.0:
        return x
    keep = opts.rng.random(x.shape) >= opts.dropout
    return x * (keep / (1.0 - opts.dropout))


def _record(stats: ActivationStats | None, blocks: list[BlockId], maxabs: np.ndarray, zero: np.ndarray) -> None:
    if stats is None:
        return
    for j, block in enumerate(blocks):
        stats.record_batch(block, maxabs[:, j], zero[:, j])


def attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, d_k: int | None = None,
                   mask: np.ndarray | None = None, bq=None, bk=None, bv=None) -> Tensor:
    """softmax((x Wq)(x Wk)^T / sqrt(d_k)) (x Wv) for one head or a stack of heads."""
    d_k = d_k or wq.shape[-1]
    if x.shape[-1] != wq.shape[-2] or x.shape[-1] != wk.shape[-2] or x.shape[-1] != wv.shape[-2]:
        raise DimensionError(f"attention input width {x.shape[-1]} vs projections "
                             f"{wq.shape}, {wk.shape}, {wv.shape}")
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    if bq is not None:
        q = q + bq
        k = k + bk
        v = v + bv
    scores = matmul(q, k.swap_last()) * (1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores, mask), v)


def mha_residual_forward(x: Tensor, layer: int, params: ModelParams, gate_cfg: GateConfig | None,
                         valid: np.ndarray, stats: ActivationStats | None = None,
                         opts: ForwardOptions | None = None) -> Tensor:
    """LayerNorm(sum of gated per-head contributions + x) for one layer.

    ``x`` is ``(batch, seq, d_model)``; ``valid`` marks non-PAD positions.
    """
    cfg = params.config
    heads = params.arch.layers[layer].heads
    gain, bias = params[f"layers.{layer}.attn_ln.gain"], params[f"layers.{layer}.attn_ln.bias"]
    if not heads:
        return layer_norm(x, gain, bias, cfg.ln_eps)
    p = f"layers.{layer}.attn."
    b, s, _ = x.shape
    h = len(heads)
    key_mask = valid[:, None, None, :]
    xs = x.reshape(b, 1, s, cfg.d_model)
    head_out = attention_head(
        xs, _weight(params, p + "wq", opts), _weight(params, p + "wk", opts), _weight(params, p + "wv", opts),
        cfg.d_k, key_mask,
        params[p + "bq"].reshape(h, 1, cfg.d_k), params[p + "bk"].reshape(h, 1, cfg.d_k),
        params[p + "bv"].reshape(h, 1, cfg.d_v),
    )
    # each head carries a fixed 1/A share of the output bias inside its gate
    contrib = matmul(head_out, _weight(params, p + "wo", opts)) + params[p + "bo"] * (1.0 / cfg.num_heads)
    pos = valid[:, None, :, None].astype(np.float64)

    if gate_cfg is not None and gate_cfg.attention_granularity == "head":
        masked = contrib * pos
        t = t_epsilon(masked, gate_cfg.eps_att, gate_cfg.sharpness, axes=(2, 3))
        if stats is not None:
            maxabs = np.abs(masked.data).max(axis=(2, 3))
            _record(stats, [BlockId(layer, ATTENTION_HEAD, hd) for hd in heads], maxabs, t.data == 0.0)
        mha = (contrib * t.reshape(b, h, 1, 1)).sum(axis=1)
    else:
        mha = contrib.sum(axis=1)
        if gate_cfg is not None:
            masked = mha * valid[:, :, None].astype(np.float64)
            t = t_epsilon(masked, gate_cfg.eps_att, gate_cfg.sharpness, axes=(1, 2))
            if stats is not None:
                maxabs = np.abs(masked.data).max(axis=(1, 2))
                _record(stats, [BlockId(layer, ATTENTION_LAYER)], maxabs[:, None], (t.data == 0.0)[:, None])
            mha = mha * t.reshape(b, 1, 1)
        elif stats is not None:
            # ungated profiling records both granularities
            maxabs = np.abs(contrib.data * pos).max(axis=(2, 3))
            _record(stats, [BlockId(layer, ATTENTION_HEAD, hd) for hd in heads], maxabs,
                    np.zeros_like(maxabs, dtype=bool))
            layer_max = np.abs(mha.data * valid[:, :, None]).max(axis=(1, 2))
            _record(stats, [BlockId(layer, ATTENTION_LAYER)], layer_max[:, None],
                    np.zeros((b, 1), dtype=bool))
    return layer_norm(x + _dropout(mha, opts), gain, bias, cfg.ln_eps)


def ffn_residual_forward(x: Tensor, layer: int, params: ModelParams, gate_cfg: GateConfig | None,
                         valid: np.ndarray, stats: ActivationStats | None = None,
                         opts: ForwardOptions | None = None) -> Tensor:
    cfg = params.config
    gain, bias = params[f"layers.{layer}.ffn_ln.gain"], params[f"layers.{layer}.ffn_ln.bias"]
    if not params.arch.layers[layer].ffn_alive:
        return layer_norm(x, gain, bias, cfg.ln_eps)
    p = f"layers.{layer}.ffn."
    hidden = activation(matmul(x, _weight(params, p + "w1", opts)) + params[p + "b1"], cfg.activation)
    out = matmul(hidden, _weight(params, p + "w2", opts)) + params[p + "b2"]
    if gate_cfg is not None or stats is not None:
        masked = out * valid[:, :, None].astype(np.float64)
        maxabs = np.abs(masked.data).max(axis=(1, 2))
        if gate_cfg is not None:
            t = t_epsilon(masked, gate_cfg.eps_ffn, gate_cfg.sharpness, axes=(1, 2))
            zero = t.data == 0.0
            out = out * t.reshape(-1, 1, 1)
        else:
            zero = np.zeros_like(maxabs, dtype=bool)
        _record(stats, [BlockId(layer, FFN)], maxabs[:, None], zero[:, None])
    return layer_norm(x + _dropout(out, opts), gain, bias, cfg.ln_eps)


def model_forward(tokens, params: ModelParams, gate_cfg: GateConfig | None = None,
                  stats: ActivationStats | None = None, opts: ForwardOptions | None = None) -> Tensor:
    """Token ids ``(batch, seq)`` to class logits ``(batch, num_classes)``.

    A CLS position is prepended; PAD positions are masked out of attention and
    gate decisions.
    """
    cfg = params.config
    ids = np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"tokens must be (batch, seq), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if ids.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    b, s = ids.shape
    full = np.concatenate([np.full((b, 1), cfg.vocab_size), ids], axis=1)
    valid = full != PAD_ID
    x = embedding(params["embed.tok"], full) + params["embed.pos"][: s + 1]
    x = layer_norm(x, params["embed.ln.gain"], params["embed.ln.bias"], cfg.ln_eps)
    for i in range(cfg.num_layers):
        x = mha_residual_forward(x, i, params, gate_cfg, valid, stats, opts)
        x = ffn_residual_forward(x, i, params, gate_cfg, valid, stats, opts)
    pooled = tanh(matmul(x[:, 0, :], params["pooler.w"]) + params["pooler.b"])
    return matmul(pooled, params["classifier.w"]) + params["classifier.b"]


# -- accounting ---------------------------------------------------------------


def head_param_count(config: ModelConfig) -> int:
    d, dk, dv = config.d_model, config.d_k, config.d_v
    return 2 * (d * dk + dk) + (d * dv + dv) + dv * d


def ffn_param_count(config: ModelConfig) -> int:
    return 2 * config.d_model * config.d_ffn + config.d_ffn + config.d_model


def count_params(config: ModelConfig, arch: Architecture, include_biases: bool = True) -> int:
    """Weights and biases of live heads and FFNs; embeddings, pooler, classifier
    and layer norms are outside the count. The shared attention output bias
    counts while at least one head of its layer is alive."""
    d, dk, dv, dff = config.d_model, config.d_k, config.d_v, config.d_ffn
    total = 0
    for layer in arch.layers:
        if include_biases:
            if layer.heads:
                total += len(layer.heads) * head_param_count(config) + d
            if layer.ffn_alive:
                total += ffn_param_count(config)
        else:
            total += len(layer.heads) * d * (2 * dk + 2 * dv)
            if layer.ffn_alive:
                total += 2 * d * dff
    return total


def count_flops(config: ModelConfig, arch: Architecture, seq_len: int) -> int:
    """Forward FLOPs of attention and FFN matmuls, two per multiply-accumulate."""
    # processed length counts the prepended CLS position
    if seq_len > config.max_seq_len + 1:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq_len")
    d, dk, dv, dff, s = config.d_model, config.d_k, config.d_v, config.d_ffn, seq_len
    per_head = 2 * s * d * (2 * dk + dv) + 2 * s * s * dk + 2 * s * s * dv + 2 * s * dv * d
    per_ffn = 2 * s * d * dff * 2
    total = 0
    for layer in arch.layers:
        total += len(layer.heads) * per_head
        if layer.ffn_alive:
            total += per_ffn
    return total
