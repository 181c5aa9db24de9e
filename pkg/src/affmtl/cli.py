"""Command-line interface.

Verbs: synth, train-single, extract-bank, train-joint, search, evaluate,
report. Exit codes: 0 success, 1 usage/config/input errors, 2 runtime
failures. All artifact writes are atomic (temp file + rename). The master
seed can be set via the AFFMTL_SEED environment variable; an explicit
``--set seed=...`` still wins.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    SentinelRates,
    load_corpus,
    split_by_video,
    synth_generate,
    TASKS,
)
from .errors import AffmtlError, ConfigError, IntegrityError, UsageError
from .metrics import EvalReport, composite_score
from .search import (
    SearchReport,
    parse_grid,
    report_to_csv,
    report_to_markdown,
    run_search,
)
from .training import (
    FeatureBank,
    TrainConfig,
    TrainResult,
    config_defaults_help,
    evaluate,
    extract_bank,
    train_joint,
    train_single,
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise ConfigError(message)


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _atomic_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)


def _parse_set(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # bare strings allowed, e.g. --set init_from=scratch
    return out


def _load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    base: dict = {}
    if path:
        try:
            base = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    env_seed = os.environ.get("AFFMTL_SEED")
    if env_seed is not None:
        try:
            base["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"AFFMTL_SEED must be an integer, got {env_seed!r}") from None
    base.update(_parse_set(overrides))
    return TrainConfig.from_dict(base)


def _log_csv(result: TrainResult) -> str:
    def cell(v):
        return "" if v is None else repr(float(v))

    lines = ["epoch,loss_total,loss_au,loss_expr,loss_va,skipped_task_batches,val_score"]
    for row in result.log:
        lines.append(",".join([
            str(row.epoch), cell(row.loss_total), cell(row.loss_au),
            cell(row.loss_expr), cell(row.loss_va),
            str(row.skipped_task_batches), cell(row.val_score),
        ]))
    return "\n".join(lines) + "\n"


def _write_run_dir(out_dir: Path, config: TrainConfig, result: TrainResult,
                   report: EvalReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.json",
                      json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    _atomic_checkpoint(result.checkpoint, out_dir / "checkpoint.best")
    atomic_write_text(out_dir / "log.csv", _log_csv(result))
    atomic_write_text(out_dir / "report.json", report.to_json())
    atomic_write_text(out_dir / "report.txt", report.to_text())


def _bank_paths(bank_dir: Path, task: str) -> tuple[Path, Path]:
    return bank_dir / f"bank.{task}", bank_dir / f"bank.{task}.json"


def _write_bank(bank: FeatureBank, out_dir: Path) -> Path:
    from .data import write_features

    out_dir.mkdir(parents=True, exist_ok=True)
    data_path, meta_path = _bank_paths(out_dir, bank.source_task)
    tmp = data_path.with_name(data_path.name + ".tmp")
    write_features(bank.vectors, tmp)
    os.replace(tmp, data_path)
    atomic_write_text(meta_path, json.dumps({
        "source_task": bank.source_task,
        "stage": bank.stage,
        "checkpoint_hash": bank.checkpoint_hash,
        "feature_dim": bank.feature_dim,
    }, sort_keys=True, indent=2) + "\n")
    return data_path


def _read_bank(data_path: Path) -> FeatureBank:
    from .data import read_features

    meta_path = data_path.with_name(data_path.name + ".json")
    if not meta_path.exists():
        raise ConfigError(f"bank {data_path} has no sidecar {meta_path.name}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return FeatureBank(
        source_task=meta["source_task"],
        stage=meta["stage"],
        checkpoint_hash=meta["checkpoint_hash"],
        feature_dim=int(meta["feature_dim"]),
        vectors=read_features(data_path),
    )


def _load_banks(bank_dir: str | None, tasks) -> dict:
    banks = {}
    if bank_dir is None:
        return banks
    for task in tasks:
        data_path, _ = _bank_paths(Path(bank_dir), task)
        if data_path.exists():
            banks[task] = _read_bank(data_path)
    return banks


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    seed = int(os.environ.get("AFFMTL_SEED", args.seed))
    rates = SentinelRates(va=args.va_sentinel_rate, expr=args.expr_sentinel_rate,
                          au=args.au_sentinel_rate)
    ann, feat = synth_generate(args.out, seed, args.videos, args.frames,
                               args.input_dim, rates)
    print(f"wrote {ann} and {feat}")
    return 0


def _cmd_train_single(args) -> int:
    config = _load_config(args.config, args.set)
    records, features = load_corpus(args.data)
    train, val = split_by_video(records, config.val_fraction)
    result = train_single(args.task, config, train, val, features)
    final_config = TrainConfig.from_dict(result.checkpoint.config)
    model = result.checkpoint.build_model()
    report = evaluate(model, val, features, final_config)
    _write_run_dir(Path(args.out), final_config, result, report)
    print(f"task {args.task}: best val score {result.best_score:.4f} "
          f"at epoch {result.best_epoch}; run dir {args.out}")
    return 0


def _cmd_extract_bank(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records, features = load_corpus(args.data)
    bank = extract_bank(ckpt, records, features)
    path = _write_bank(bank, Path(args.out))
    print(f"wrote {path} ({len(bank.vectors)} frames, dim {bank.feature_dim})")
    return 0


def _cmd_train_joint(args) -> int:
    config = _load_config(args.config, args.set)
    records, features = load_corpus(args.data)
    train, val = split_by_video(records, config.val_fraction)
    banks = _load_banks(args.banks, config.fusion_sources)
    init_ckpt = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    result = train_joint(config, train, val, features, banks, init_checkpoint=init_ckpt)
    model = result.checkpoint.build_model()
    report = evaluate(model, val, features, config, banks)
    _write_run_dir(Path(args.out), config, result, report)
    print(f"tasks {','.join(config.tasks)}: best val score {result.best_score:.4f} "
          f"at epoch {result.best_epoch}; run dir {args.out}")
    return 0


def _cmd_search(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read grid {args.grid}: {e}") from None
    specs, seeds, train_overrides, skipped = parse_grid(grid)
    base_config = _load_config(None, args.set)
    if train_overrides:
        merged = base_config.to_dict()
        merged.update(train_overrides)
        merged.update(_parse_set(args.set))
        base_config = TrainConfig.from_dict(merged)

    records, features = load_corpus(args.data)
    train, val = split_by_video(records, base_config.val_fraction)

    targets = sorted({s.target for s in specs})
    needed_banks = sorted({b for s in specs for b in s.fusion_sources})
    banks = {}
    init_checkpoints = {}
    if args.single:
        single = Path(args.single)
        for task in needed_banks:
            data_path = single / task / f"bank.{task}"
            if not data_path.exists():
                raise ConfigError(f"grid needs bank {task}; {data_path} not found")
            banks[task] = _read_bank(data_path)
        if base_config.init_from == "primary":
            for task in targets:
                ckpt_path = single / task / "checkpoint.best"
                if not ckpt_path.exists():
                    raise ConfigError(
                        f"init_from=primary needs {ckpt_path} (or set init_from=scratch)")
                init_checkpoints[task] = load_checkpoint(ckpt_path)
    elif needed_banks:
        raise ConfigError(f"grid needs banks {needed_banks}; pass --single DIR")
    elif base_config.init_from == "primary":
        raise ConfigError("init_from=primary needs --single DIR (or set init_from=scratch)")

    report = run_search(specs, seeds, base_config, train, val, features, banks,
                        init_checkpoints, jobs=args.jobs, skipped=skipped)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "search_report.csv", report_to_csv(report))
    atomic_write_text(out / "search_report.md", report_to_markdown(report))
    atomic_write_text(out / "search_grid.json", json.dumps({
        "grid": grid,
        "base_config": base_config.to_dict(),
        "n_strategies": len(specs),
    }, sort_keys=True, indent=2) + "\n")
    atomic_write_text(out / "timing.txt", "".join(
        f"row {i}: {row.wall_clock_s:.3f}s\n" for i, row in enumerate(report.rows)))
    best = [r for r in report.rows if r.best]
    for row in best:
        print(f"best for {row.spec.target}: fusion={list(row.spec.fusion_sources)} "
              f"joint={list(row.spec.joint_tasks)} seq_len={row.spec.seq_len} "
              f"stride={row.spec.stride} mean={row.mean:.4f}")
    print(f"wrote {out / 'search_report.csv'} and {out / 'search_report.md'}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.config)
    records, features = load_corpus(args.data)
    _, val = split_by_video(records, config.val_fraction)
    split = val if args.split == "val" else records
    banks = _load_banks(args.banks, config.fusion_sources)
    for s in config.fusion_sources:
        if s not in banks:
            raise ConfigError(f"checkpoint fuses {s!r}; pass --banks DIR containing bank.{s}")
    report = evaluate(ckpt.build_model(), split, features, config, banks)
    sys.stdout.write(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "report.json", report.to_json())
        atomic_write_text(out / "report.txt", report.to_text())
    return 0


def _report_row(run: str, rep: EvalReport) -> list:
    if rep.composite is not None:
        expected = composite_score(rep.mean_ccc, rep.expr_f1, rep.au_f1)
        if expected != rep.composite:
            raise IntegrityError(
                f"{run}: stored composite {rep.composite!r} != recomputed {expected!r}")
    if rep.ccc_valence is not None and rep.ccc_arousal is not None:
        expected_mean = (rep.ccc_valence + rep.ccc_arousal) / 2.0
        if rep.mean_ccc != expected_mean:
            raise IntegrityError(
                f"{run}: stored mean_ccc {rep.mean_ccc!r} != recomputed {expected_mean!r}")
    return [run, rep.ccc_valence, rep.ccc_arousal, rep.mean_ccc,
            rep.expr_f1, rep.au_f1, rep.composite]


def _cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ConfigError(f"{run_dir} has no report.json")
        rep = EvalReport.from_json(path.read_text(encoding="utf-8"))
        rows.append(_report_row(str(run_dir), rep))
    rows.sort(key=lambda r: (r[6] is None, -(r[6] if r[6] is not None else 0.0), r[0]))
    header = ["run", "ccc_valence", "ccc_arousal", "mean_ccc", "expr_f1", "au_f1", "P"]

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    widths = [max(len(header[i]), max((len(fmt(r[i])) if i else len(str(r[i])))
                                      for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        cells = [str(r[0])] + [fmt(v) for v in r[1:]]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    if args.out:
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join([str(r[0])] + ["" if v is None else repr(v) for v in r[1:]]))
        atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affmtl",
                     description="Progressive multi-task affect learning.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="output data directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--va-sentinel-rate", type=float, default=0.0)
    p.add_argument("--expr-sentinel-rate", type=float, default=0.0)
    p.add_argument("--au-sentinel-rate", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    config_help = "Config keys (JSON file and --set key=value):\n" + config_defaults_help()

    p = sub.add_parser("train-single", help="train one encoder + task head",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=config_help)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--data", required=True, help="directory with annotations.csv + features.bin")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train_single)

    p = sub.add_parser("extract-bank", help="freeze a trained encoder into a feature bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for bank.<task>")
    p.set_defaults(func=_cmd_extract_bank)

    p = sub.add_parser("train-joint", help="joint training with fusion/temporal",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=config_help)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--banks", help="directory holding bank.<task> files")
    p.add_argument("--init-checkpoint", help="single-task checkpoint for encoder warm start")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train_joint)

    p = sub.add_parser("search", help="grid search over joint strategies",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=config_help)
    p.add_argument("--grid", required=True, help="JSON grid config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--single", help="directory of per-task single run dirs "
                                    "(<task>/checkpoint.best, <task>/bank.<task>)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--banks")
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--out", help="directory to write report.json/report.txt")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="consolidate run reports into one table")
    p.add_argument("runs", nargs="+", help="run directories containing report.json")
    p.add_argument("--out", help="CSV file for the consolidated table")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except AffmtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
