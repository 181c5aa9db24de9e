"""Grid search over joint-training strategies.

A strategy fixes, for one target task: which frozen banks to fuse, which
tasks to train jointly, and the temporal window geometry. Each strategy runs
once per seed; the report carries per-seed validation scores on the target
task's own metric, their mean, and a best flag per target. Results are
bitwise independent of --jobs because every run derives its own seed stream
and rows are assembled in grid order.
"""
from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import TASKS
from .errors import AffmtlError, ConfigError
from .training import Checkpoint, FeatureBank, TrainConfig, train_joint

_GRID_KEYS = {"targets", "seeds", "train"}
_TARGET_KEYS = {"fusion_subsets", "joint_sets", "windows"}


@dataclass(frozen=True)
class StrategySpec:
    """One grid point: target task + fusion sources + joint set + windowing."""

    target: str
    fusion_sources: tuple[str, ...]
    joint_tasks: tuple[str, ...]
    temporal: bool
    seq_len: int
    stride: int

    def validate(self) -> None:
        if self.target not in TASKS:
            raise ConfigError(f"unknown target task {self.target!r}")
        if self.target not in self.joint_tasks:
            raise ConfigError(f"target {self.target} not in joint set {self.joint_tasks}")
        if self.joint_tasks[0] != self.target:
            raise ConfigError("the target must be the primary (first) joint task")
        if self.target in self.fusion_sources:
            raise ConfigError(f"target {self.target} cannot fuse its own bank")
        if self.temporal != (self.seq_len > 1):
            raise ConfigError("temporal flag inconsistent with seq_len")

    def to_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        cfg = replace(
            base,
            tasks=self.joint_tasks,
            fusion_sources=self.fusion_sources,
            temporal=self.temporal,
            seq_len=self.seq_len,
            stride=self.stride,
            temporal_tasks=None,
            seed=seed,
        )
        cfg.validate()
        return cfg

    def row_key(self) -> tuple:
        return (self.target, self.fusion_sources, self.joint_tasks,
                self.temporal, self.seq_len, self.stride)


def parse_grid(grid: dict) -> tuple[list[StrategySpec], list[int], dict, list[str]]:
    """Expand a grid config into specs; returns (specs, seeds, train overrides,
    messages about skipped invalid combinations)."""
    unknown = set(grid) - _GRID_KEYS
    if unknown:
        raise ConfigError(f"unknown grid key(s): {sorted(unknown)}")
    if "targets" not in grid or not grid["targets"]:
        raise ConfigError("grid needs a non-empty 'targets' table")
    seeds = grid.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    specs: list[StrategySpec] = []
    skipped: list[str] = []
    for target, body in grid["targets"].items():
        if target not in TASKS:
            raise ConfigError(f"unknown target task {target!r}")
        unknown = set(body) - _TARGET_KEYS
        if unknown:
            raise ConfigError(f"target {target}: unknown key(s) {sorted(unknown)}")
        fusion_subsets = body.get("fusion_subsets", [[]])
        joint_sets = body.get("joint_sets", [[target]])
        windows = body.get("windows", [[1, 1]])
        for fusion in fusion_subsets:
            for joint in joint_sets:
                # The target leads the joint set; keep the declared order of
                # the rest.
                ordered = [target] + [t for t in joint if t != target]
                for seq_len, stride in windows:
                    spec = StrategySpec(
                        target=target,
                        fusion_sources=tuple(fusion),
                        joint_tasks=tuple(ordered),
                        temporal=seq_len > 1,
                        seq_len=int(seq_len),
                        stride=int(stride),
                    )
                    try:
                        spec.validate()
                        if target not in joint:
                            raise ConfigError(f"target {target} missing from joint set {joint}")
                    except ConfigError as e:
                        skipped.append(str(e))
                        continue
                    specs.append(spec)
    if not specs:
        raise ConfigError("grid expands to zero valid strategies")
    return specs, list(seeds), grid.get("train", {}), skipped


@dataclass
class SearchRow:
    spec: StrategySpec
    scores: list  # per seed: float, or an error string
    mean: float | None
    best: bool
    wall_clock_s: float  # informational; excluded from serialized reports


@dataclass
class SearchReport:
    rows: list
    seeds: list
    skipped: list


def _run_one(args) -> tuple[int, int, object, float]:
    """Worker: one (spec, seed) training run; returns score or error string."""
    (index, spec, seed, base_cfg_dict, train_records, val_records,
     features, banks, init_checkpoints) = args
    t0 = time.perf_counter()
    try:
        base = TrainConfig.from_dict(base_cfg_dict)
        cfg = spec.to_config(base, seed)
        init = init_checkpoints.get(spec.target)
        result = train_joint(cfg, train_records, val_records, features, banks,
                             init_checkpoint=init)
        return index, seed, float(result.best_score), time.perf_counter() - t0
    except AffmtlError as e:
        return index, seed, f"error: {e}", time.perf_counter() - t0


def run_search(specs: list[StrategySpec], seeds: list[int], base_config: TrainConfig,
               train_records, val_records, features: dict,
               banks: dict[str, FeatureBank],
               init_checkpoints: dict[str, Checkpoint] | None = None,
               jobs: int = 1, skipped: list[str] | None = None) -> SearchReport:
    """Run every spec × seed and assemble the report in grid order.

    A failed run records its error string in place of a score and the search
    continues; the mean covers successful seeds only.
    """
    init_checkpoints = init_checkpoints or {}
    work = [
        (i, spec, seed, base_config.to_dict(), train_records, val_records,
         features, banks, init_checkpoints)
        for i, spec in enumerate(specs) for seed in seeds
    ]
    results: dict[tuple[int, int], tuple[object, float]] = {}
    if jobs <= 1:
        for args in work:
            i, seed, score, dt = _run_one(args)
            results[(i, seed)] = (score, dt)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, seed, score, dt in pool.map(_run_one, work):
                results[(i, seed)] = (score, dt)

    rows = []
    for i, spec in enumerate(specs):
        scores = [results[(i, s)][0] for s in seeds]
        wall = sum(results[(i, s)][1] for s in seeds)
        ok = [s for s in scores if isinstance(s, float)]
        mean = sum(ok) / len(ok) if ok else None
        rows.append(SearchRow(spec=spec, scores=scores, mean=mean, best=False,
                              wall_clock_s=wall))

    # Flag the best row per target: highest mean; ties prefer fewer fusion
    # sources, then shorter windows, then grid order.
    for target in dict.fromkeys(s.target for s in specs):
        candidates = [(r.mean, -len(r.spec.fusion_sources), -r.spec.seq_len, -i)
                      for i, r in enumerate(rows)
                      if r.spec.target == target and r.mean is not None]
        if candidates:
            best_i = -max(candidates)[3]
            rows[best_i].best = True
    return SearchReport(rows=rows, seeds=list(seeds), skipped=list(skipped or []))


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def _mark_columns(spec: StrategySpec) -> list[str]:
    cols = [("1" if t in spec.fusion_sources else "0") for t in TASKS]
    cols += [("1" if t in spec.joint_tasks else "0") for t in TASKS]
    cols += ["1" if spec.temporal else "0", str(spec.seq_len), str(spec.stride)]
    return cols


def report_to_csv(report: SearchReport) -> str:
    """Deterministic CSV (no timing); floats via repr for exact round-trips."""
    header = (["target"]
              + [f"fusion_{t}" for t in TASKS]
              + [f"joint_{t}" for t in TASKS]
              + ["temporal", "seq_len", "stride"]
              + [f"score_seed{s}" for s in report.seeds]
              + [f"error_seed{s}" for s in report.seeds]
              + ["mean", "best"])
    lines = [",".join(header)]
    for row in report.rows:
        cells = [row.spec.target] + _mark_columns(row.spec)
        cells += [repr(s) if isinstance(s, float) else "" for s in row.scores]
        cells += [s.replace(",", ";") if isinstance(s, str) else "" for s in row.scores]
        cells += ["" if row.mean is None else repr(row.mean), "1" if row.best else "0"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def report_from_csv(text: str) -> SearchReport:
    lines = [l for l in text.split("\n") if l]
    header = lines[0].split(",")
    seeds = [int(c[len("score_seed"):]) for c in header if c.startswith("score_seed")]
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        target = cells[0]
        fusion = tuple(t for t, c in zip(TASKS, cells[1:5]) if c == "1")
        joint_set = tuple(t for t, c in zip(TASKS, cells[5:9]) if c == "1")
        ordered = (target,) + tuple(t for t in joint_set if t != target)
        temporal = cells[9] == "1"
        seq_len, stride = int(cells[10]), int(cells[11])
        n = len(seeds)
        score_cells = cells[12:12 + n]
        error_cells = cells[12 + n:12 + 2 * n]
        scores = [float(sc) if sc else ec for sc, ec in zip(score_cells, error_cells)]
        mean = float(cells[12 + 2 * n]) if cells[12 + 2 * n] else None
        best = cells[12 + 2 * n + 1] == "1"
        spec = StrategySpec(target, fusion, ordered, temporal, seq_len, stride)
        rows.append(SearchRow(spec=spec, scores=scores, mean=mean, best=best,
                              wall_clock_s=0.0))
    return SearchReport(rows=rows, seeds=seeds, skipped=[])


def report_to_markdown(report: SearchReport) -> str:
    """One table per target task; the best row's scores are bolded."""
    out = []
    targets = list(dict.fromkeys(r.spec.target for r in report.rows))
    for target in targets:
        out.append(f"## Target: {target}\n")
        header = ([f"F_{t}" for t in TASKS] + [f"J_{t}" for t in TASKS]
                  + ["Temporal", "seq", "stride"]
                  + [f"seed {s}" for s in report.seeds] + ["mean"])
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "---|" * len(header))
        for row in report.rows:
            if row.spec.target != target:
                continue
            mc = _mark_columns(row.spec)
            cells = ["x" if c == "1" else "" for c in mc[:8]]
            cells += ["x" if row.spec.temporal else "",
                      str(row.spec.seq_len), str(row.spec.stride)]
            for s in row.scores:
                cells.append(f"{s:.4f}" if isinstance(s, float) else "failed")
            cells.append("" if row.mean is None else f"{row.mean:.4f}")
            if row.best:
                cells = [f"**{c}**" if c else c for c in cells]
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    if report.skipped:
        out.append("Skipped invalid grid points:\n")
        for msg in report.skipped:
            out.append(f"- {msg}")
        out.append("")
    return "\n".join(out)
