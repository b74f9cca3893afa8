import numpy as np
import pytest

from snip.autograd import ConfigurationError
from snip.data import (IngestionError, TaskSpec, batch_iter, build_vocab, detokenize, load_csv_dataset,
                       make_synthetic_task, tokenize)
from snip.model import PAD_ID, UNK_ID


def test_tokenize_char():
    assert tokenize("ab", "char", {"a": 2, "b": 3}, 4) == [2, 3, PAD_ID, PAD_ID]


def test_tokenize_whitespace_unknown():
    assert tokenize("x y", "whitespace", {"y": 2}, 3) == [UNK_ID, 2, PAD_ID]


def test_tokenize_clips_and_rejects_empty_vocab():
    assert tokenize("abc", "char", {"a": 2, "b": 3, "c": 4}, 2) == [2, 3]
    with pytest.raises(ConfigurationError):
        tokenize("a", "char", {}, 2)


def test_detokenize_round_trip():
    vocab = build_vocab(["hello world"], "char")
    ids = tokenize("hello", "char", vocab, 8)
    assert detokenize(ids, "char", vocab) == "hello"
    assert tokenize(detokenize(ids, "char", vocab), "char", vocab, 8) == ids


def test_synthetic_task_is_deterministic():
    a, b = make_synthetic_task(TaskSpec(size=100, seed=5)), make_synthetic_task(TaskSpec(size=100, seed=5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.ids, y.ids)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_parity_labels_recount():
    train, ev = make_synthetic_task(TaskSpec(kind="parity_of_marked_positions", size=300, seed=2))
    for ds in (train, ev):
        for text, label in zip(ds.texts, ds.labels):
            assert text.split().count("m") % 2 == label


def test_keyword_sentiment_labels():
    train, _ = make_synthetic_task(TaskSpec(kind="keyword_sentiment", size=200, seed=1))
    for text, label in zip(train.texts, train.labels):
        toks = set(text.split())
        assert bool(toks & {"good", "great", "fine"}) == bool(label)


def test_redundant_probe_distractors_are_label_independent():
    """Permutation test on a chi-square statistic of distractor counts vs label."""
    train, _ = make_synthetic_task(TaskSpec(size=2000, seed=0))
    noise = [f"n{i}" for i in range(12)]
    counts = np.array([[t.split().count(n) for n in noise] for t in train.texts], dtype=float)
    labels = train.labels

    def stat(lab):
        by = np.stack([counts[lab == c].mean(axis=0) for c in (0, 1)])
        return float(((by[0] - by[1]) ** 2).sum())

    observed = stat(labels)
    rng = np.random.default_rng(0)
    null = [stat(rng.permutation(labels)) for _ in range(200)]
    p_value = (1 + sum(n >= observed for n in null)) / (1 + len(null))
    assert p_value > 0.01
    for text, label in zip(train.texts, labels):
        signal = [t for t in text.split() if t.startswith("s")]
        assert signal and all(t.startswith(f"s{label}_") for t in signal)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(redundancy=1.0)
    with pytest.raises(ConfigurationError):
        make_synthetic_task(TaskSpec(size=5))


def _write(tmp_path, text, name="d.csv", encoding="utf-8"):
    p = tmp_path / name
    p.write_bytes(text.encode(encoding) if isinstance(text, str) else text)
    return p


def test_csv_split_sizes_and_duplicates(tmp_path):
    rows = "text,label\n" + "".join(f"same,{'pos' if i % 2 else 'neg'}\n" for i in range(10))
    train, ev = load_csv_dataset(_write(tmp_path, rows), "text", "label")
    assert (len(train), len(ev)) == (9, 1)
    assert train.label_names == ["neg", "pos"]
    assert len(set(train.texts)) == 1


def test_csv_quoted_fields(tmp_path):
    rows = 'text,label\n"a, b",x\n"c",y\n' * 10
    train, _ = load_csv_dataset(_write(tmp_path, rows), "text", "label")
    assert "a, b" in train.texts


def test_csv_missing_column(tmp_path):
    with pytest.raises(IngestionError, match="'label'"):
        load_csv_dataset(_write(tmp_path, "text,y\na,1\n"), "text", "label")


def test_csv_non_utf8_reports_offset(tmp_path):
    with pytest.raises(IngestionError, match="byte offset 13"):
        load_csv_dataset(_write(tmp_path, b"text,label\nab\xff,1\n"), "text", "label")


def test_csv_vocab_from_train_only(tmp_path):
    rows = "text,label\n" + "".join(f"{chr(97 + i)},{i % 2}\n" for i in range(20))
    train, ev = load_csv_dataset(_write(tmp_path, rows), "text", "label")
    assert set(train.vocab) == set("".join(train.texts))
    for text, ids in zip(ev.texts, ev.ids):
        assert text not in train.vocab
        assert ids[0] == UNK_ID


def test_batch_sizes_and_determinism():
    train, _ = make_synthetic_task(TaskSpec(size=100, seed=0))
    five = train.subset(range(5))
    assert [len(b[1]) for b in batch_iter(five, 2, 0, 0)] == [2, 2, 1]
    a = [b[0] for b in batch_iter(train, 16, 3, 1)]
    b = [b[0] for b in batch_iter(train, 16, 3, 1)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        next(batch_iter(train, 0, 0, 0))


def test_epochs_shuffle_differently():
    train, _ = make_synthetic_task(TaskSpec(size=100, seed=0))
    differ = 0
    for seed in range(20):
        e0 = np.concatenate([l for _, l in batch_iter(train, 10, seed, 0)])
        e1 = np.concatenate([l for _, l in batch_iter(train, 10, seed, 1)])
        i0 = np.concatenate([i[:, 0] for i, _ in batch_iter(train, 10, seed, 0)])
        i1 = np.concatenate([i[:, 0] for i, _ in batch_iter(train, 10, seed, 1)])
        differ += not (np.array_equal(e0, e1) and np.array_equal(i0, i1))
    assert differ >= 19
