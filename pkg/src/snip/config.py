"""Strict YAML run configuration with defaults echoed for provenance."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .autograd import ConfigurationError
from .data import TaskSpec, load_csv_dataset, make_synthetic_task
from .model import ModelConfig
from .optim import OptimizerConfig
from .pruning import MODES, PruneConfig

RESOLVED_NAME = "resolved_config.yaml"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())


class ModelSection(_Strict):
    num_layers: int = Field(2, ge=1)
    d_model: int = Field(16, ge=1)
    num_heads: int = Field(4, ge=1)
    d_k: int = Field(4, ge=1)
    d_v: int = Field(4, ge=1)
    d_ffn: int = Field(32, ge=1)
    activation: Literal["relu", "gelu"] = "gelu"
    ln_eps: float = Field(1e-5, gt=0)


class PruneSection(_Strict):
    k: int = Field(1, ge=1)
    theta: float = Field(0.95, gt=0, le=1)
    mode: Literal[MODES] = "single_head_and_ffn"
    max_iterations: int = Field(10, ge=0)
    accuracy_budget: float = Field(0.01, ge=0, le=1)
    l1_factor: float = Field(0.01, ge=0)
    baseline_epochs: int = Field(6, ge=0)
    train_epochs: int = Field(2, ge=0)
    retrain_epochs: int = Field(2, ge=0)
    batch_size: int = Field(32, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    sharpness: float = Field(1e5, gt=0)
    trace_every: int = Field(20, ge=0)


class OptimizerSection(_Strict):
    name: Literal["adamw", "sgd"] = "adamw"
    lr: float = Field(3e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-6, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    warmup_fraction: float = Field(0.1, ge=0, lt=1)


class TaskSection(_Strict):
    kind: Literal["parity_of_marked_positions", "keyword_sentiment", "redundant_head_probe", "csv"] = \
        "redundant_head_probe"
    size: int = Field(2000, ge=1)
    seq_len: int = Field(12, ge=1)
    redundancy: float = Field(0.75, ge=0, lt=1)
    num_classes: int = Field(2, ge=2)
    csv_path: Optional[str] = None
    text_column: str = "text"
    label_column: str = "label"
    scheme: Literal["char", "whitespace"] = "char"


class RunConfig(_Strict):
    model: ModelSection = ModelSection()
    prune: PruneSection = PruneSection()
    optimizer: OptimizerSection = OptimizerSection()
    task: TaskSection = TaskSection()
    sn_enabled: bool = True
    sn_target: float = Field(5.0, gt=0)
    sn_mode: Literal["rescale", "clip"] = "clip"
    output_dir: str = "runs/default"
    seed: int = Field(0, ge=0)

    def build_prune_config(self) -> PruneConfig:
        return PruneConfig(**self.prune.model_dump(), seed=self.seed)

    def build_optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer.model_dump())

    def build_model_config(self, vocab_size: int, max_seq_len: int, num_classes: int) -> ModelConfig:
        return ModelConfig(**self.model.model_dump(), vocab_size=vocab_size,
                           max_seq_len=max_seq_len, num_classes=num_classes)

    def load_task(self, base_dir: Path | None = None):
        t = self.task
        if t.kind == "csv":
            if not t.csv_path:
                raise ConfigurationError("task.csv_path: required when task.kind is csv")
            path = Path(t.csv_path)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            return load_csv_dataset(path, t.text_column, t.label_column, t.scheme, t.seq_len, self.seed)
        spec = TaskSpec(kind=t.kind, size=t.size, seq_len=t.seq_len, seed=self.seed,
                        redundancy=t.redundancy, num_classes=t.num_classes)
        try:
            return make_synthetic_task(spec)
        except ValueError as exc:
            raise ConfigurationError(f"task: {exc}") from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, default_flow_style=False)


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "extra_forbidden":
            lines.append(f"{path}: unknown key")
        else:
            lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(payload: dict | None) -> RunConfig:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigurationError("<root>: config must be a mapping")
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(_describe(exc)) from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        payload = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(payload)


def write_resolved(config: RunConfig, outdir) -> Path:
    out = Path(outdir) / RESOLVED_NAME
    out.write_text(config.to_yaml(), encoding="utf-8")
    return out
