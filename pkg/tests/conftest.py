import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from snip.data import TaskSpec, make_synthetic_task  # noqa: E402
from snip.model import ModelConfig  # noqa: E402
from snip.pruning import PruneConfig, init_state, train_plain  # noqa: E402

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): acceptance criterion check")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = report.user_properties and dict(report.user_properties).get("acceptance")
    if not marker:
        return
    number, text = marker
    entry = _ACCEPTANCE.setdefault(number, {"text": text, "passed": True, "checks": 0})
    entry["checks"] += 1
    entry["passed"] &= report.outcome == "passed"


@pytest.fixture(autouse=True)
def _tag_acceptance(request):
    m = request.node.get_closest_marker("acceptance")
    if m is not None:
        request.node.user_properties.append(("acceptance", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['text']} ({e['checks']} checks)")


@pytest.fixture(scope="session")
def tiny_task():
    return make_synthetic_task(TaskSpec(size=400, seq_len=8, seed=3))


@pytest.fixture(scope="session")
def tiny_model_config(tiny_task):
    train, _ = tiny_task
    return ModelConfig(num_layers=2, d_model=8, num_heads=2, d_k=4, d_v=4, d_ffn=16,
                       vocab_size=train.vocab_size, max_seq_len=train.seq_len)


@pytest.fixture(scope="session")
def _trained_state(tiny_task, tiny_model_config):
    train, ev = tiny_task
    state = init_state(PruneConfig(seed=1, dropout=0.0, trace_every=0), tiny_model_config, train, ev,
                       sn_enabled=False)
    train_plain(state, 3)
    return state


@pytest.fixture
def trained_state(_trained_state):
    """A fresh copy of a briefly trained small model (tests may mutate it)."""
    from dataclasses import replace
    s = _trained_state
    return replace(s, params=s.params.copy(), history=[], traces=[])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def run_default(seed: int = 0, **overrides):
    """run_schedule exactly as the CLI would with default configuration."""
    from snip.config import config_from_dict
    from snip.pruning import run_schedule
    cfg = config_from_dict({"seed": seed, **overrides})
    train, ev = cfg.load_task()
    model_cfg = cfg.build_model_config(train.vocab_size, train.seq_len, train.num_classes)
    return run_schedule(cfg.build_prune_config(), model_cfg, train, ev, cfg.build_optimizer_config(),
                        cfg.sn_enabled, cfg.sn_target, cfg.sn_mode)


@pytest.fixture(scope="session")
def default_schedule():
    import time
    start = time.perf_counter()
    result = run_default(0)
    return result, time.perf_counter() - start
