"""Tokenizers, synthetic classification tasks, CSV ingestion and batching."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import ConfigurationError
from .model import PAD_ID, UNK_ID

SCHEMES = ("char", "whitespace")
TASK_KINDS = ("parity_of_marked_positions", "keyword_sentiment", "redundant_head_probe", "csv")
TRAIN_FRACTION = 0.9


class IngestionError(ValueError):
    pass


def split_tokens(text: str, scheme: str) -> list[str]:
    if scheme == "char":
        return list(text)
    if scheme == "whitespace":
        return text.split()
    raise ConfigurationError(f"unknown tokenizer scheme {scheme!r}")


def build_vocab(texts, scheme: str) -> dict[str, int]:
    """Ids start after the reserved PAD and UNK ids, in first-seen order."""
    vocab: dict[str, int] = {}
    for text in texts:
        for tok in split_tokens(text, scheme):
            if tok not in vocab:
                vocab[tok] = len(vocab) + 2
    return vocab


def tokenize(text: str, scheme: str, vocab: dict[str, int], seq_len: int) -> list[int]:
    if not vocab:
        raise ConfigurationError("empty vocabulary")
    ids = [vocab.get(tok, UNK_ID) for tok in split_tokens(text, scheme)][:seq_len]
    return ids + [PAD_ID] * (seq_len - len(ids))


def detokenize(ids, scheme: str, vocab: dict[str, int]) -> str:
    inverse = {i: t for t, i in vocab.items()}
    toks = [inverse.get(int(i), "<unk>") for i in ids if int(i) != PAD_ID]
    return ("" if scheme == "char" else " ").join(toks)


@dataclass
class Dataset:
    ids: np.ndarray
    labels: np.ndarray
    vocab: dict[str, int]
    num_classes: int
    split: str
    texts: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values(), default=UNK_ID) + 1

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=int)
        return Dataset(self.ids[index], self.labels[index], self.vocab, self.num_classes, self.split,
                       [self.texts[i] for i in index] if self.texts else [], self.label_names)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "redundant_head_probe"
    size: int = 2000
    seq_len: int = 12
    seed: int = 0
    redundancy: float = 0.75
    num_classes: int = 2
    scheme: str = "whitespace"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 0.0 <= self.redundancy < 1.0:
            raise ValueError("task.redundancy must lie in [0, 1)")
        if self.num_classes < 2:
            raise ValueError("task.num_classes must be >= 2")


def _split(texts: list[str], raw_labels: list, seq_len: int, scheme: str, seed: int,
           label_names: list[str] | None = None) -> tuple[Dataset, Dataset]:
    """Seeded 90/10 split; vocab and (unless given) label names come from train only."""
    order = np.random.default_rng(seed).permutation(len(texts))
    n_train = int(round(TRAIN_FRACTION * len(texts)))
    train_idx, eval_idx = order[:n_train], order[n_train:]
    vocab = build_vocab((texts[i] for i in train_idx), scheme)
    if label_names is None:
        label_names = sorted({str(raw_labels[i]) for i in train_idx})
    mapping = {name: i for i, name in enumerate(label_names)}

    def make(idx, tag):
        try:
            labels = [mapping[str(raw_labels[i])] for i in idx]
        except KeyError as exc:
            raise IngestionError(f"label {exc.args[0]!r} in the {tag} split never occurs in training") from None
        ids = [tokenize(texts[i], scheme, vocab, seq_len) for i in idx]
        return Dataset(np.array(ids, dtype=np.int64).reshape(len(idx), seq_len),
                       np.array(labels, dtype=np.int64), vocab, len(label_names), tag,
                       [texts[i] for i in idx], list(label_names))

    return make(train_idx, "train"), make(eval_idx, "eval")


def _redundant_probe(spec: TaskSpec, rng: np.random.Generator) -> tuple[list[str], list[int]]:
    """Label = class of the signal tokens; distractors are drawn independently of it."""
    n_signal = max(1, int(round((1.0 - spec.redundancy) * spec.seq_len)))
    noise = [f"n{i}" for i in range(12)]
    texts, labels = [], []
    for _ in range(spec.size):
        label = int(rng.integers(spec.num_classes))
        toks = list(rng.choice(noise, size=spec.seq_len))
        pos = rng.choice(spec.seq_len, size=n_signal, replace=False)
        for p in pos:
            toks[p] = f"s{label}_{int(rng.integers(2))}"
        texts.append(" ".join(toks))
        labels.append(label)
    return texts, labels


def _parity(spec: TaskSpec, rng: np.random.Generator) -> tuple[list[str], list[int]]:
    filler = [f"f{i}" for i in range(6)]
    texts, labels = [], []
    for _ in range(spec.size):
        toks = [("m" if rng.random() < 0.3 else str(rng.choice(filler))) for _ in range(spec.seq_len)]
        texts.append(" ".join(toks))
        labels.append(toks.count("m") % 2)
    return texts, labels


def _keyword_sentiment(spec: TaskSpec, rng: np.random.Generator) -> tuple[list[str], list[int]]:
    pos_words, neg_words = ["good", "great", "fine"], ["bad", "awful", "poor"]
    filler = ["the", "a", "movie", "was", "plot", "and", "it", "very"]
    texts, labels = [], []
    for _ in range(spec.size):
        label = int(rng.integers(2))
        toks = list(rng.choice(filler, size=spec.seq_len))
        toks[int(rng.integers(spec.seq_len))] = str(rng.choice(pos_words if label else neg_words))
        texts.append(" ".join(toks))
        labels.append(label)
    return texts, labels


_GENERATORS = {
    "redundant_head_probe": _redundant_probe,
    "parity_of_marked_positions": _parity,
    "keyword_sentiment": _keyword_sentiment,
}


def make_synthetic_task(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    if spec.kind == "csv":
        raise ConfigurationError("csv tasks are loaded with load_csv_dataset")
    num_classes = spec.num_classes if spec.kind == "redundant_head_probe" else 2
    if spec.size < 10 * num_classes:
        raise ConfigurationError(f"task.size must be at least {10 * num_classes}")
    rng = np.random.default_rng(spec.seed)
    texts, labels = _GENERATORS[spec.kind](spec, rng)
    return _split(texts, labels, spec.seq_len, "whitespace", spec.seed,
                  [str(i) for i in range(num_classes)])


def load_csv_dataset(path, text_column: str, label_column: str, scheme: str = "char",
                     seq_len: int = 32, seed: int = 0) -> tuple[Dataset, Dataset]:
    raw = Path(path).read_bytes()
    try:
        content = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path}: not valid UTF-8 at byte offset {exc.start}") from exc
    reader = csv.DictReader(io.StringIO(content, newline=""))
    if reader.fieldnames is None:
        raise IngestionError(f"{path}: missing header row")
    for column in (text_column, label_column):
        if column not in reader.fieldnames:
            raise IngestionError(f"{path}: missing column {column!r}")
    rows = list(reader)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    texts = [row[text_column] for row in rows]
    labels = [row[label_column] for row in rows]
    if len(set(labels)) < 2:
        raise IngestionError(f"{path}: need at least two distinct labels")
    return _split(texts, labels, seq_len, scheme, seed)


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded per-epoch shuffle; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.ids[idx], dataset.labels[idx]
