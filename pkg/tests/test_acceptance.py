"""Acceptance gate. Every criterion runs at its stated tolerance; the terminal
summary prints one PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest

from conftest import run_default
from oracles import (BERT_PARAMS_STATED, BERT_PARAMS_WEIGHTS_ONLY, BERT_PARAMS_WITH_BIASES, flops_by_matmul,
                     gate_oracle, jacobi_singular_values)
from snip.autograd import (Graph, Tensor, absolute, amax, cross_entropy, embedding, finite_diff_check, gelu,
                           layer_norm, relative_error, relu, softmax_rows, tanh)
from snip.cli import CHECKPOINT_NAME, main
from snip.gates import ATTENTION_HEAD, FFN, ActivationStats, BlockId, GateConfig, s_epsilon, t_epsilon
from snip.model import (Architecture, ForwardOptions, ModelConfig, ModelParams, count_flops, count_params,
                        model_forward)
from snip.pruning import logits_for, measure_usage
from snip.reports import REPORT_FILES
from snip.spectral import SpectralState, estimate_spectral_norm, normalize_weight

GRAD_TOL = 1e-4


# -- 1. gradient suite -------------------------------------------------------------------


def _off_kinks(x, lo=1e-3):
    """Push entries away from 0 so relu/abs kinks are not straddled."""
    x = np.where(np.abs(x) < lo, np.sign(x + 1e-12) * (lo + np.abs(x)), x)
    return x


def _op_cases(rng):
    """(name, scalar function of one array, input) for every taped op."""
    R = rng.standard_normal
    w35, w53, w33, w32, w5, w5b, w3, w232 = R((3, 5)), R((5, 3)), R((3, 3)), R((3, 2)), R(5), R(5), R(3), R((2, 3, 2))
    mask = np.array([True, True, False, True, True])
    ids = np.array([[0, 2, 2], [1, 3, 0]])
    labels = np.array([2, 0, 1, 1])
    cases = [
        ("add", lambda t: ((t + Tensor(w35)) * Tensor(w35)).sum(), R((3, 5))),
        ("sub", lambda t: ((Tensor(w35) - t) * Tensor(w35)).sum(), R((3, 5))),
        ("mul", lambda t: (t * t * Tensor(w35)).sum(), R((3, 5))),
        ("div", lambda t: (Tensor(w35) / (t * t + 1.0)).sum(), R((3, 5))),
        ("rdiv", lambda t: (2.0 / (t * t + 0.5)).sum(), R((3, 5))),
        ("neg", lambda t: ((-t) * Tensor(w35)).sum(), R((3, 5))),
        ("matmul", lambda t: ((t @ Tensor(w53)) * Tensor(w33)).sum(), R((3, 5))),
        ("batched matmul", lambda t: (t @ t.swap_last()).sum(), R((2, 3, 4))),
        ("getitem", lambda t: (t[:, 1:4] * Tensor(w35[:, :3])).sum(), R((3, 5))),
        ("sum axis", lambda t: (t.sum(axis=0) * Tensor(w5)).sum(), R((3, 5))),
        ("mean", lambda t: (t.mean(axis=1, keepdims=True) * t).sum(), R((3, 5))),
        ("reshape", lambda t: (t.reshape(5, 3) @ Tensor(w32)).sum(), R((3, 5))),
        ("softmax", lambda t: (softmax_rows(t) * Tensor(w35)).sum(), R((3, 5))),
        ("masked softmax", lambda t: (softmax_rows(t, mask) * Tensor(w35)).sum(), R((3, 5))),
        ("layer_norm x", lambda t: (layer_norm(t, Tensor(w5), Tensor(w5b)) * Tensor(w35)).sum(), R((3, 5))),
        ("layer_norm gain", lambda t: (layer_norm(Tensor(w35), t, Tensor(w5b)) * Tensor(w35)).sum(), R(5)),
        ("relu", lambda t: (relu(t) * Tensor(w35)).sum(), _off_kinks(R((3, 5)))),
        ("gelu", lambda t: (gelu(t) * Tensor(w35)).sum(), R((3, 5))),
        ("tanh", lambda t: (tanh(t) * Tensor(w35)).sum(), R((3, 5))),
        ("abs", lambda t: (absolute(t) * Tensor(w35)).sum(), _off_kinks(R((3, 5)))),
        ("amax", lambda t: (amax(t, axis=(1,)) * Tensor(w3)).sum(), R((3, 5))),
        ("embedding", lambda t: (embedding(t, ids) * Tensor(w232)).sum(), R((4, 2))),
        ("cross_entropy", lambda t: cross_entropy(t, labels), R((4, 3))),
    ]
    return cases


def _gate_case(rng):
    """s_epsilon with a soft sharpness so the linear region is exercised away from its corners."""
    L = 10.0
    while True:
        v = rng.standard_normal(6)
        m = np.max(np.abs(v))
        eps = m - rng.uniform(0.02, 0.08)
        srt = np.sort(np.abs(v))
        if srt[-1] - srt[-2] > 1e-3:
            return lambda t: (s_epsilon(t, eps, L) * Tensor(np.arange(1.0, 7.0))).sum(), v


def _spectral_case(rng):
    W0 = rng.standard_normal((4, 3))
    x = rng.standard_normal((2, 4))
    state = SpectralState(target=2.0, mode="rescale")
    state.init_matrix("w", W0, seed=0, warmup=2000)
    return lambda t: (Tensor(x) @ state.normalized("w", t, update=False)).sum(), W0


def _model_point(seed):
    """A 2-layer gated model with gates off their boundaries; returns (f, flat params)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_layers=2, d_model=6, num_heads=2, d_k=3, d_v=3, d_ffn=8, vocab_size=9, max_seq_len=5)
    params = ModelParams.init(cfg, seed=seed)
    ids = rng.integers(2, 9, size=(3, 5))
    ids[0, 3:] = 0
    labels = rng.integers(0, 2, size=3)
    names = params.names()
    shapes = [params[n].shape for n in names]
    flat0 = np.concatenate([params[n].data.ravel() for n in names])
    L, margin = 20.0, 1e-3

    def unpack(flat: Tensor):
        out, i = {}, 0
        for n, s in zip(names, shapes):
            size = int(np.prod(s))
            out[n] = flat[i:i + size].reshape(*s)
            i += size
        return out

    profile = ActivationStats()
    model_forward(ids, params, None, profile)
    head_means = [profile.mean_maxabs(b) for b in profile.block_ids() if b.kind == ATTENTION_HEAD]
    ffn_means = [profile.mean_maxabs(b) for b in profile.block_ids() if b.kind == FFN]
    for attempt in range(200):
        gate = GateConfig(float(np.median(head_means)) * rng.uniform(0.5, 1.0),
                          float(np.median(ffn_means)) * rng.uniform(0.5, 1.0), L, "head")
        stats = ActivationStats()
        model_forward(ids, params, gate, stats)
        ok = True
        for b in stats.block_ids():
            eps = gate.eps_att if b.kind == ATTENTION_HEAD else gate.eps_ffn
            v = np.array(stats[b].values)
            if np.any(np.abs(v - eps) < margin) or np.any(np.abs(v - eps - 1 / L) < margin):
                ok = False
        if ok:
            break
    else:
        raise RuntimeError("no off-boundary gate setting found")

    def f(flat: Tensor):
        p = ModelParams(cfg, Architecture.full(cfg), unpack(flat))
        return cross_entropy(model_forward(ids, p, gate), labels)

    return f, flat0


def _directional_error(f, x, rng, directions=4, coords=8, h=1e-5):
    leaf = Tensor(x.copy(), requires_grad=True)
    with Graph() as g:
        out = f(leaf)
    g.backward(out)
    grad = leaf.grad
    worst = 0.0
    probes = [d / np.linalg.norm(d) for d in rng.standard_normal((directions, x.size))]
    for i in rng.choice(x.size, size=coords, replace=False):
        e = np.zeros(x.size)
        e[i] = 1.0
        probes.append(e)
    for d in probes:
        fp = float(f(Tensor(x + h * d)).data)
        fm = float(f(Tensor(x - h * d)).data)
        numeric = (fp - fm) / (2 * h)
        analytic = float(grad @ d)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.mark.acceptance(1, "gradient suite: every op and a 2-layer gated model, rel err < 1e-4, < 1 min")
def test_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = {}
    points = 0
    for rep in range(3):
        for name, f, x in _op_cases(rng):
            errors[f"{name}#{rep}"] = finite_diff_check(f, x)
            points += 1
    for rep in range(8):
        f, x = _gate_case(rng)
        errors[f"s_epsilon#{rep}"] = finite_diff_check(f, x)
        points += 1
    for rep in range(8):
        f, x = _spectral_case(rng)
        errors[f"spectral#{rep}"] = finite_diff_check(f, x, h=1e-6)
        points += 1
    for seed in range(15):
        f, x = _model_point(seed)
        errors[f"model#{seed}"] = _directional_error(f, x, np.random.default_rng(seed))
        points += 1
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    assert points >= 100
    assert errors[worst] < GRAD_TOL, f"{worst}: {errors[worst]:.3e}"
    assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"


# -- 2. spectral oracle suite ---------------------------------------------------------------


@pytest.mark.acceptance(2, "power iteration vs Jacobi SVD on 100 matrices, rel err < 1e-6; rescaled sigma = 5 +- 1e-6")
def test_spectral_oracle_suite():
    rng = np.random.default_rng(77)
    worst_est, worst_norm = 0.0, 0.0
    for i in range(100):
        m, n = rng.integers(1, 65, size=2)
        W = rng.standard_normal((m, n)) * rng.uniform(0.1, 10.0)
        oracle = jacobi_singular_values(W)[0]
        est = estimate_spectral_norm(W, seed=i)
        worst_est = max(worst_est, abs(est.sigma - oracle) / oracle)
        W5 = normalize_weight(W, est.sigma, 5.0)
        worst_norm = max(worst_norm, abs(estimate_spectral_norm(W5, seed=i + 1000).sigma - 5.0))
    assert worst_est < 1e-6, worst_est
    assert worst_norm < 1e-6, worst_norm


# -- 3. gate semantics ---------------------------------------------------------------------------


def _gate_vectors(rng, count=1000, L=1e5):
    cases = []
    for i in range(count):
        n = int(rng.integers(1, 17))
        eps = float(rng.uniform(0.0, 3.0))
        kind = i % 5
        if kind == 0:
            m = eps  # lower boundary, exactly
        elif kind == 1:
            m = eps + 1.0 / L  # upper boundary as a float
        elif kind == 2:
            m = float(rng.uniform(0.0, eps)) if eps > 0 else 0.0
        elif kind == 3:
            m = eps + float(rng.uniform(0.0, 1.0 / L))
        else:
            m = eps + 1.0 / L + float(rng.uniform(0.0, 2.0))
        v = rng.uniform(-1.0, 1.0, n) * m
        v[rng.integers(n)] = m * (1 if rng.random() < 0.5 else -1)
        cases.append((v, eps))
    return cases


@pytest.mark.acceptance(3, "s_epsilon exact zero / unchanged / linear gate on 1000 vectors incl. boundaries")
def test_gate_semantics():
    L = 1e5
    seen = {"zero": 0, "identity": 0, "linear": 0}
    for v, eps in _gate_vectors(np.random.default_rng(3)):
        kind, t_exact = gate_oracle(v, eps, L)
        seen[kind] += 1
        s = s_epsilon(Tensor(v), eps, L).data
        t = float(t_epsilon(Tensor(v), eps, L).data)
        if kind == "zero":
            assert np.all(s == 0.0) and t == 0.0
        elif kind == "identity":
            assert np.array_equal(s, v) and t == 1.0
        else:
            assert abs(t - float(t_exact)) < 1e-9
            np.testing.assert_allclose(s, t * v, rtol=0, atol=1e-15)
    assert min(seen.values()) >= 150, seen


# -- 4. strict-identity equivalence ----------------------------------------------------------


def _max_of(stats, block):
    return float(np.max(stats[block].values))


@pytest.mark.acceptance(4, "removing identity-rate-1.0 blocks changes every logit by <= 1e-9")
def test_strict_identity_equivalence(trained_state):
    state = trained_state
    data = state.train_set
    first = ActivationStats()
    model_forward(data.ids, state.params, None, first, ForwardOptions())
    heads0 = [b for b in first.block_ids() if b.kind == ATTENTION_HEAD and b.layer == 0]
    target = min(heads0, key=lambda b: _max_of(first, b))
    eps_att = _max_of(first, target)
    gated = ActivationStats()
    model_forward(data.ids, state.params, GateConfig(eps_att, 0.0), gated)
    eps_ffn = _max_of(gated, BlockId(0, FFN))
    state.gate = GateConfig(eps_att, eps_ffn)

    rates = measure_usage(state, data)
    identity = [b for b, r in rates.items() if r == 1.0]
    assert target in identity and BlockId(0, FFN) in identity
    before = logits_for(state, data, state.gate)
    for block in identity:
        state.params.remove_block(block)
    after = logits_for(state, data, state.gate)
    assert np.max(np.abs(after - before)) <= 1e-9


# -- 5. epsilon monotonicity --------------------------------------------------------------------


@pytest.mark.acceptance(5, "sweeping 20 increasing eps never decreases the gated-block count per batch")
def test_epsilon_monotonicity(trained_state):
    state = trained_state
    ids = state.eval_set.ids
    profile = ActivationStats()
    model_forward(ids, state.params, None, profile)
    top = max(_max_of(profile, b) for b in profile.block_ids())
    sweep = np.linspace(0.0, 1.1 * top, 20)
    batches = [ids[i:i + 8] for i in range(0, len(ids), 8)]
    for batch in batches:
        counts = []
        for eps in sweep:
            stats = ActivationStats()
            model_forward(batch, state.params, GateConfig(eps, eps), stats)
            counts.append(sum(stats[b].zero_count for b in stats.block_ids()))
        assert all(a <= b for a, b in zip(counts, counts[1:])), counts
        assert counts[0] == 0 and counts[-1] > 0


# -- 6. constructed-redundancy pruning --------------------------------------------------------


@pytest.mark.acceptance(6, "defaults remove >= 35% of params within 1 point of baseline, < 10 min")
def test_constructed_redundancy_pruning(default_schedule):
    res, elapsed = default_schedule
    assert res.pct_pruned >= 0.35, res.pct_pruned
    assert res.best.eval_metric >= res.baseline.eval_metric - 0.01
    assert elapsed < 600, elapsed


# -- 7. SN vs no-SN --------------------------------------------------------------------------


def _block_range(res) -> float:
    means = [v for k, v in res.baseline.mean_maxabs.items() if not k.endswith(".ATT")]
    return max(means) - min(means)


@pytest.fixture(scope="module")
def sn_comparison():
    out = []
    for seed in range(5):
        plain = run_default(seed, sn_enabled=False)
        sn = run_default(seed, sn_enabled=True, sn_target=1.0)
        out.append((seed, plain, sn))
    return out


@pytest.mark.acceptance(7, "SN prunes >= no-SN in 4/5 seeds and narrows the block mean max-abs range")
def test_sn_reduction_at_least_plain(sn_comparison):
    wins = [sn.pct_pruned >= plain.pct_pruned for _, plain, sn in sn_comparison]
    assert sum(wins) >= 4, [(s, p.pct_pruned, q.pct_pruned) for s, p, q in sn_comparison]


@pytest.mark.acceptance(7, "SN prunes >= no-SN in 4/5 seeds and narrows the block mean max-abs range")
def test_sn_narrows_block_range(sn_comparison):
    for seed, plain, sn in sn_comparison:
        assert _block_range(sn) < _block_range(plain), (seed, _block_range(sn), _block_range(plain))


# -- 8. accounting -----------------------------------------------------------------------------

BERT = ModelConfig(num_layers=12, d_model=768, num_heads=12, d_k=64, d_v=64, d_ffn=3072, vocab_size=30522,
                   max_seq_len=512)


@pytest.mark.acceptance(8, "BERT-base-like counts: params 85,026,816 / 84,934,656; FLOPs within 15% of 22.5e9")
def test_bert_param_count_with_biases_stated_value():
    assert count_params(BERT, Architecture.full(BERT)) == BERT_PARAMS_STATED


@pytest.mark.acceptance(8, "BERT-base-like counts: params 85,026,816 / 84,934,656; FLOPs within 15% of 22.5e9")
def test_bert_param_count_matches_hand_count():
    arch = Architecture.full(BERT)
    assert count_params(BERT, arch) == BERT_PARAMS_WITH_BIASES
    assert count_params(BERT, arch, include_biases=False) == BERT_PARAMS_WEIGHTS_ONLY == 84_934_656


@pytest.mark.acceptance(8, "BERT-base-like counts: params 85,026,816 / 84,934,656; FLOPs within 15% of 22.5e9")
def test_bert_flops():
    flops = count_flops(BERT, Architecture.full(BERT), 128)
    assert flops == flops_by_matmul(768, [12] * 12, 64, 64, 3072, [True] * 12, 128)
    assert abs(flops - 22.5e9) <= 0.15 * 22.5e9


# -- 9. determinism -----------------------------------------------------------------------------


@pytest.mark.acceptance(9, "two identical prune runs give byte-identical CSVs and checkpoints")
def test_prune_determinism(tmp_path):
    config = tmp_path / "c.yaml"
    config.write_text("seed: 4\n")
    for run in ("a", "b"):
        assert main(["prune", "--config", str(config), "--out", str(tmp_path / run)]) == 0
    for name in REPORT_FILES + (CHECKPOINT_NAME, "history.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# -- 10. granularity ablation ----------------------------------------------------------------------


@pytest.mark.acceptance(10, "single head + FFN mode compresses >= whole-attention-layer and whole-layer modes")
@pytest.mark.parametrize("seed", [0, 1])
def test_granularity_ablation(seed, default_schedule):
    single = default_schedule[0] if seed == 0 else run_default(seed)
    for mode in ("whole_attention_layer", "whole_layer"):
        other = run_default(seed, prune={"mode": mode})
        assert single.pct_pruned >= other.pct_pruned, (mode, single.pct_pruned, other.pct_pruned)
