"""Command-line entry point: train, prune, eval, profile, report.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .autograd import ConfigurationError
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, parse_config, write_resolved
from .data import IngestionError
from .model import InputError, count_params
from .pruning import PruneState, TrainingDiverged, evaluate, init_state, profile, run_schedule
from .reports import HISTORY_FILE, emit_from_history, emit_reports, write_history, write_norm_hist
from .spectral import stacked_spectral_norms

log = logging.getLogger("snip")

CHECKPOINT_NAME = "model.ckpt"
LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snip", description="Structured pruning of transformer encoders with epsilon gates.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    specs = {
        "train": "train the ungated baseline only",
        "prune": "run the full prune schedule",
        "eval": "evaluate a checkpoint on the configured dataset",
        "profile": "norm histograms and spectral estimates for a checkpoint",
        "report": "re-emit CSV reports from a history file",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="output directory (default: output_dir from config)")
        if name in ("eval", "profile"):
            p.add_argument("--checkpoint", default=None, help=f"checkpoint path (default: OUT/{CHECKPOINT_NAME})")
        if name == "report":
            p.add_argument("--history", default=None, help=f"history file (default: OUT/{HISTORY_FILE})")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


@contextlib.contextmanager
def output_lock(outdir: Path):
    """Sentinel file so two runs never interleave writes in one directory."""
    outdir.mkdir(parents=True, exist_ok=True)
    lock = outdir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{outdir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _datasets(cfg: RunConfig, config_path: Path):
    train, ev = cfg.load_task(config_path.parent)
    model_cfg = cfg.build_model_config(train.vocab_size, train.seq_len, train.num_classes)
    return train, ev, model_cfg


def _save(outdir: Path, params, sn, state: PruneState, metadata: dict) -> Path:
    rng = {"seed": state.config.seed, "epoch": state.epoch, "step": state.step}
    return save_checkpoint(Checkpoint(params, sn, rng, None, metadata), outdir / CHECKPOINT_NAME)


def _run(cfg: RunConfig, config_path: Path, outdir: Path, baseline_only: bool) -> dict:
    train, ev, model_cfg = _datasets(cfg, config_path)
    prune_cfg = cfg.build_prune_config()
    if baseline_only:
        prune_cfg = replace(prune_cfg, max_iterations=0)
    result = run_schedule(prune_cfg, model_cfg, train, ev, cfg.build_optimizer_config(),
                          cfg.sn_enabled, cfg.sn_target, cfg.sn_mode)
    write_history(result, outdir)
    emit_reports(result.history, result.baseline_stats, result.traces, outdir, result.best_iteration)
    _save(outdir, result.best_params, result.best_sn, result.final,
          {"iteration": result.best_iteration, "stop_reason": result.stop_reason})
    best = result.best
    return {"baseline_eval": result.baseline.eval_metric, "final_eval": best.eval_metric,
            "params": best.params, "pct_pruned": result.pct_pruned, "stop_reason": result.stop_reason}


def _load_for(cfg: RunConfig, config_path: Path, ckpt_path: Path):
    ckpt = load_checkpoint(ckpt_path)
    train, ev, _ = _datasets(cfg, config_path)
    state = init_state(cfg.build_prune_config(), ckpt.config, train, ev, sn_enabled=False)
    state.params, state.sn = ckpt.params, ckpt.sn
    return ckpt, state


def _eval(cfg, config_path, outdir, args) -> dict:
    ckpt, state = _load_for(cfg, config_path, Path(args.checkpoint or outdir / CHECKPOINT_NAME))
    out = {"train_metric": evaluate(state, state.train_set), "eval_metric": evaluate(state, state.eval_set),
           "params": count_params(ckpt.config, ckpt.arch)}
    (outdir / "eval.json").write_text(json.dumps(out, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def _profile(cfg, config_path, outdir, args) -> dict:
    ckpt, state = _load_for(cfg, config_path, Path(args.checkpoint or outdir / CHECKPOINT_NAME))
    stats = profile(state, state.train_set)
    write_norm_hist(stats, outdir / "profile_norm_hist.csv")
    rows = ["name,index,sigma,converged,iterations"]
    for name in ckpt.params.sn_names():
        for j, est in enumerate(stacked_spectral_norms(ckpt.params[name].data)):
            rows.append(f"{name},{j},{est.sigma:.6f},{int(est.converged)},{est.iterations}")
    (outdir / "profile_spectral.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return {"blocks": len(stats.block_ids()), "matrices": len(rows) - 1}


def _report(cfg, config_path, outdir, args) -> dict:
    history = Path(args.history or outdir / HISTORY_FILE)
    if not history.exists():
        raise FileNotFoundError(f"history file {history} not found")
    paths = emit_from_history(history, outdir)
    return {"written": [p.name for p in paths]}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    config_path = Path(args.config)
    try:
        cfg = parse_config(config_path)
        overrides = {"seed": args.seed} if args.seed is not None else {}
        if args.out:
            overrides["output_dir"] = args.out
        if overrides:
            cfg = config_from_dict({**cfg.model_dump(mode="json"), **overrides})
        outdir = Path(cfg.output_dir)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1

    try:
        with output_lock(outdir):
            if args.command in ("train", "prune"):
                write_resolved(cfg, outdir)
                out = _run(cfg, config_path, outdir, baseline_only=args.command == "train")
            elif args.command == "eval":
                out = _eval(cfg, config_path, outdir, args)
            elif args.command == "profile":
                out = _profile(cfg, config_path, outdir, args)
            else:
                out = _report(cfg, config_path, outdir, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, IngestionError, InputError, TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
