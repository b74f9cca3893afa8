"""CSV report emission with fixed formatting so identical runs give identical bytes."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .gates import ATTENTION_HEAD, ATTENTION_LAYER, FFN, ActivationStats
from .pruning import PruneRecord, ScheduleResult

REPORT_FILES = ("prune_curve.csv", "prune_map.csv", "norm_hist.csv", "spectral_trace.csv", "summary.csv")
HISTORY_FILE = "history.json"


def fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    return f"{float(x):.6f}"


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def pct_pruned(record: PruneRecord, baseline: PruneRecord) -> float:
    return 0.0 if baseline.params == 0 else 1.0 - record.params / baseline.params


def _curve_rows(history: list[PruneRecord]):
    base = history[0]
    for r in history:
        yield [r.iteration, r.eps_att, r.eps_ffn, r.params, r.flops, pct_pruned(r, base),
               r.train_metric, r.eval_metric]


def _map_rows(history: list[PruneRecord]):
    full = history[0].architecture["layers"]
    for r in history:
        layers = r.architecture["layers"]
        for i, layer in enumerate(layers):
            alive_heads = set(layer["heads"])
            for h in full[i]["heads"]:
                label = f"L{i}.H{h}"
                yield [r.iteration, i, ATTENTION_HEAD, h, h in alive_heads,
                       r.identity_rates.get(label, ""), r.mean_maxabs.get(label, "")]
            label = f"L{i}.ATT"
            if label in r.identity_rates or label in r.mean_maxabs:
                yield [r.iteration, i, ATTENTION_LAYER, "", bool(alive_heads),
                       r.identity_rates.get(label, ""), r.mean_maxabs.get(label, "")]
            label = f"L{i}.FFN"
            yield [r.iteration, i, FFN, "", layer["ffn_alive"],
                   r.identity_rates.get(label, ""), r.mean_maxabs.get(label, "")]


def _hist_rows(stats: ActivationStats):
    for block in stats.block_ids():
        counts, edges = stats.histogram(block)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            yield [block.label, float(lo), float(hi), int(c)]


def write_norm_hist(stats: ActivationStats, path) -> Path:
    path = Path(path)
    _write(path, ["block", "bin_lo", "bin_hi", "count"], _hist_rows(stats))
    return path


def summary_row(history: list[PruneRecord], best_iteration: int) -> list:
    base, best = history[0], history[best_iteration]
    pct = pct_pruned(best, base)
    table = f"-{100 * pct:.1f}%/{100 * best.eval_metric:.1f}"
    return [best_iteration, base.params, best.params, pct, base.eval_metric, best.eval_metric, table]


def emit_reports(history: list[PruneRecord], stats: ActivationStats, traces, outdir,
                 best_iteration: int | None = None) -> list[Path]:
    """Write the five report CSVs; ``best_iteration`` defaults to the last record."""
    if not history:
        raise ValueError("emit_reports needs at least the baseline record")
    best_iteration = len(history) - 1 if best_iteration is None else best_iteration
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in REPORT_FILES]
    _write(paths[0], ["iteration", "eps_att", "eps_ffn", "params", "flops", "pct_params_pruned",
                      "train_metric", "eval_metric"], _curve_rows(history))
    _write(paths[1], ["iteration", "layer", "kind", "head_index", "alive", "identity_rate", "mean_maxabs"],
           _map_rows(history))
    write_norm_hist(stats, paths[2])
    _write(paths[3], ["step", "layer", "matrix", "sigma"], ([int(s), int(l), m, float(v)] for s, l, m, v in traces))
    _write(paths[4], ["iteration", "params_baseline", "params_final", "pct_params_pruned",
                      "baseline_metric", "final_metric", "table_row"], [summary_row(history, best_iteration)])
    return paths


def history_payload(result: ScheduleResult) -> dict:
    return {
        "history": [r.to_dict() for r in result.history],
        "best_iteration": result.best_iteration,
        "stop_reason": result.stop_reason,
        "baseline_stats": result.baseline_stats.to_dict(),
        "traces": [list(t) for t in result.traces],
    }


def write_history(result: ScheduleResult, outdir) -> Path:
    path = Path(outdir) / HISTORY_FILE
    path.write_text(json.dumps(history_payload(result), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def emit_from_history(history_path, outdir) -> list[Path]:
    payload = json.loads(Path(history_path).read_text(encoding="utf-8"))
    history = [PruneRecord.from_dict(r) for r in payload["history"]]
    stats = ActivationStats.from_dict(payload["baseline_stats"])
    traces = [tuple(t) for t in payload["traces"]]
    return emit_reports(history, stats, traces, outdir, payload["best_iteration"])
