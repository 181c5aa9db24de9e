"""Annotation records, file formats, windowing, batching, synthetic corpora.

Annotation CSV columns (fixed order):
    video_id,frame_index,valence,arousal,expression,au1,au2,au4,au6,au7,
    au10,au12,au15,au23,au24,au25,au26
Valence/arousal are floats in [-1, 1] or the -5 sentinel; expression is an
integer class 0..7 or -1; the 12 action-unit columns are each 0/1, or all -1
for an unlabeled row. Floats serialize via repr so a parse/serialize round
trip is byte-exact.

Feature files are binary: u32 format version, u32 record count, then per
record a length-prefixed UTF-8 video id, u32 frame index, u32 dim, and the
float64 little-endian vector. Records are written sorted by
(video_id, frame_index).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    DuplicateConflictError,
    LabelValidationError,
    MissingFrameError,
    ParseError,
)
from .layers import NUM_AUS, NUM_EXPRESSIONS
from .objectives import AU_SENTINEL, EXPR_SENTINEL, VA_SENTINEL

AU_NAMES = ("au1", "au2", "au4", "au6", "au7", "au10", "au12",
            "au15", "au23", "au24", "au25", "au26")
CSV_COLUMNS = ("video_id", "frame_index", "valence", "arousal", "expression") + AU_NAMES
CSV_HEADER = ",".join(CSV_COLUMNS)

FEATURE_FORMAT_VERSION = 1

TASKS = ("AU", "EXPR", "V", "A")  # trainable/targetable tasks
FILTER_TASKS = ("AU", "EXPR", "VA")


def head_task(task: str) -> str:
    """Map a task to the head that serves it (V and A share the VA head)."""
    return "VA" if task in ("V", "A") else task


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    frame_index: int
    valence: float
    arousal: float
    expression: int
    aus: tuple[int, ...]  # 12 entries, each 0/1, or all -1

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)

    def valid_for(self, task: str) -> bool:
        task = head_task(task)
        if task == "AU":
            return self.aus[0] != AU_SENTINEL
        if task == "EXPR":
            return self.expression != EXPR_SENTINEL
        if task == "VA":
            return self.valence != VA_SENTINEL and self.arousal != VA_SENTINEL
        raise LabelValidationError(f"unknown task {task!r}")


def _validate_record(rec: AnnotationRecord, line: int) -> None:
    def bad(field: str, why: str) -> LabelValidationError:
        return LabelValidationError(f"line {line}: {field} {why}")

    if not rec.video_id:
        raise bad("video_id", "is empty")
    if rec.frame_index < 0:
        raise bad("frame_index", f"{rec.frame_index} is negative")
    for name, v in (("valence", rec.valence), ("arousal", rec.arousal)):
        if v != VA_SENTINEL and not (-1.0 <= v <= 1.0):
            raise bad(name, f"{v!r} outside [-1, 1] and not the -5 sentinel")
    if rec.expression != EXPR_SENTINEL and not (0 <= rec.expression < NUM_EXPRESSIONS):
        raise bad("expression", f"{rec.expression} outside 0..7 and not the -1 sentinel")
    if any(a == AU_SENTINEL for a in rec.aus):
        if any(a != AU_SENTINEL for a in rec.aus):
            raise bad("aus", "mix valid values with the -1 sentinel")
    elif any(a not in (0, 1) for a in rec.aus):
        raise bad("aus", f"{rec.aus} contains values outside {{0, 1}}")


def parse_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Read an annotation CSV; errors carry 1-based line numbers."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != CSV_HEADER:
            raise ParseError(f"line 1: header must be exactly {CSV_HEADER!r}")
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.rstrip("\n").rstrip("\r")
            if not raw:
                continue
            parts = raw.split(",")
            if len(parts) != len(CSV_COLUMNS):
                raise ParseError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(parts)}")
            try:
                rec = AnnotationRecord(
                    video_id=parts[0],
                    frame_index=int(parts[1]),
                    valence=float(parts[2]),
                    arousal=float(parts[3]),
                    expression=int(parts[4]),
                    aus=tuple(int(p) for p in parts[5:]),
                )
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            _validate_record(rec, lineno)
            records.append(rec)
    return records


def serialize_annotations(records: list[AnnotationRecord], path: str | Path) -> None:
    """Write records in the canonical CSV format (floats via repr)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            row = [r.video_id, str(r.frame_index), repr(float(r.valence)),
                   repr(float(r.arousal)), str(r.expression)]
            row.extend(str(a) for a in r.aus)
            fh.write(",".join(row) + "\n")


def dedup(records: list[AnnotationRecord]) -> tuple[list[AnnotationRecord], int]:
    """Drop exact duplicate (video_id, frame_index) rows, keeping the first.

    Returns (kept records, number removed). Two rows with the same key but
    different labels are a conflict, not a duplicate.
    """
    seen: dict[tuple[str, int], AnnotationRecord] = {}
    kept = []
    removed = 0
    for rec in records:
        prev = seen.get(rec.key)
        if prev is None:
            seen[rec.key] = rec
            kept.append(rec)
        elif prev == rec:
            removed += 1
        else:
            raise DuplicateConflictError(
                f"conflicting labels for {rec.key}: {prev} vs {rec}"
            )
    return kept, removed


@dataclass(frozen=True)
class DatasetSplit:
    """Ordered records plus per-task valid counts and label histograms."""

    records: tuple[AnnotationRecord, ...]
    valid_counts: dict
    au_positive_counts: np.ndarray
    expr_class_counts: np.ndarray

    @staticmethod
    def from_records(records) -> "DatasetSplit":
        records = tuple(records)
        counts = {t: 0 for t in FILTER_TASKS}
        au_pos = np.zeros(NUM_AUS, dtype=np.int64)
        expr_counts = np.zeros(NUM_EXPRESSIONS, dtype=np.int64)
        for r in records:
            for t in FILTER_TASKS:
                if r.valid_for(t):
                    counts[t] += 1
            if r.valid_for("AU"):
                au_pos += np.asarray(r.aus, dtype=np.int64)
            if r.valid_for("EXPR"):
                expr_counts[r.expression] += 1
        return DatasetSplit(records, counts, au_pos, expr_counts)

    def __len__(self) -> int:
        return len(self.records)


def filter_valid(records, task: str) -> DatasetSplit:
    """Keep only records carrying a valid label for ``task`` (V/A -> VA).

    Idempotent: filtering a filtered split changes nothing.
    """
    task = head_task(task)
    if task not in FILTER_TASKS:
        raise LabelValidationError(f"unknown task {task!r}")
    recs = records.records if isinstance(records, DatasetSplit) else records
    return DatasetSplit.from_records(r for r in recs if r.valid_for(task))


# ---------------------------------------------------------------------------
# Windowing and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """``seq_len`` consecutive frames of one video; short tails replicate the
    last real frame with pad_mask False."""

    video_id: str
    start: int  # frame_index of the first real frame
    frames: tuple[AnnotationRecord, ...]
    pad_mask: tuple[bool, ...]  # True for real frames

    @property
    def seq_len(self) -> int:
        return len(self.frames)


def _consecutive_runs(records: list[AnnotationRecord]):
    run = [records[0]]
    for rec in records[1:]:
        if rec.frame_index == run[-1].frame_index + 1:
            run.append(rec)
        else:
            yield run
            run = [rec]
    yield run


def build_windows(records, seq_len: int, stride: int) -> list[Window]:
    """Slide windows of ``seq_len`` frames with ``stride`` between starts.

    Windows never span videos; a gap in frame indices ends the current run.
    Starts are 0, stride, 2·stride, ... while they fall inside the run, so a
    gapless video of length L yields ceil(L / stride) windows; stride <
    seq_len overlaps, stride = seq_len tiles. Output is in canonical
    (video_id, start frame) order.
    """
    if seq_len < 1 or stride < 1:
        raise DegenerateInputError(f"seq_len {seq_len} and stride {stride} must be >= 1")
    recs = records.records if isinstance(records, DatasetSplit) else list(records)
    by_video: dict[str, list[AnnotationRecord]] = {}
    for r in recs:
        by_video.setdefault(r.video_id, []).append(r)
    windows = []
    for vid in sorted(by_video):
        frames = sorted(by_video[vid], key=lambda r: r.frame_index)
        for run in _consecutive_runs(frames):
            for start in range(0, len(run), stride):
                chunk = run[start:start + seq_len]
                n_real = len(chunk)
                if n_real < seq_len:
                    chunk = chunk + [chunk[-1]] * (seq_len - n_real)
                windows.append(Window(
                    video_id=vid,
                    start=run[start].frame_index,
                    frames=tuple(chunk),
                    pad_mask=tuple([True] * n_real + [False] * (seq_len - n_real)),
                ))
    return windows


@dataclass
class Batch:
    """Flattened (batch·seq_len) frame block with per-task label arrays."""

    features: np.ndarray  # (b*s, input_dim)
    valence: np.ndarray  # (b*s,)
    arousal: np.ndarray  # (b*s,)
    expression: np.ndarray  # (b*s,) int
    aus: np.ndarray  # (b*s, 12) int
    pad_mask: np.ndarray  # (b*s,) bool, True for real frames
    keys: list  # (video_id, frame_index) per row
    batch: int
    seq_len: int


def _window_arrays(window_group: list[Window], features: dict) -> Batch:
    frames = [f for w in window_group for f in w.frames]
    missing = sorted({f.key for f in frames if f.key not in features})
    if missing:
        raise MissingFrameError(f"no feature vector for {missing[:5]}"
                                + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""))
    feats = np.stack([np.asarray(features[f.key], dtype=np.float64) for f in frames])
    return Batch(
        features=feats,
        valence=np.array([f.valence for f in frames], dtype=np.float64),
        arousal=np.array([f.arousal for f in frames], dtype=np.float64),
        expression=np.array([f.expression for f in frames], dtype=np.int64),
        aus=np.array([f.aus for f in frames], dtype=np.int64),
        pad_mask=np.array([m for w in window_group for m in w.pad_mask], dtype=bool),
        keys=[f.key for f in frames],
        batch=len(window_group),
        seq_len=window_group[0].seq_len,
    )


def batches(windows: list[Window], features: dict, batch_size: int,
            *, seed: int = 0, shuffle: bool = False):
    """Yield Batches of up to ``batch_size`` windows; the tail batch may be
    short. With shuffle, window order is a seeded permutation of the
    canonical order; otherwise canonical order is kept."""
    if batch_size < 1:
        raise DegenerateInputError(f"batch_size {batch_size} must be >= 1")
    order = np.arange(len(windows))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(windows))
    for lo in range(0, len(windows), batch_size):
        group = [windows[i] for i in order[lo:lo + batch_size]]
        yield _window_arrays(group, features)


# ---------------------------------------------------------------------------
# Feature file IO
# ---------------------------------------------------------------------------


def write_features(features: dict, path: str | Path) -> None:
    """Write {(video_id, frame_index): vector} in the binary feature format."""
    keys = sorted(features)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", FEATURE_FORMAT_VERSION, len(keys)))
        for vid, idx in keys:
            vid_b = vid.encode("utf-8")
            vec = np.ascontiguousarray(features[(vid, idx)], dtype="<f8")
            fh.write(struct.pack("<I", len(vid_b)))
            fh.write(vid_b)
            fh.write(struct.pack("<II", idx, vec.size))
            fh.write(vec.tobytes())


def read_features(path: str | Path) -> dict:
    """Read a binary feature file back into {(video_id, frame_index): vector}."""
    out = {}
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ParseError(f"{path}: truncated feature file header")
        version, count = struct.unpack("<II", head)
        if version != FEATURE_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported feature format version {version}")
        for i in range(count):
            (vid_len,) = struct.unpack("<I", fh.read(4))
            vid = fh.read(vid_len).decode("utf-8")
            idx, dim = struct.unpack("<II", fh.read(8))
            payload = fh.read(8 * dim)
            if len(payload) != 8 * dim:
                raise ParseError(f"{path}: truncated record {i}")
            out[(vid, idx)] = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return out


def split_by_video(records: list[AnnotationRecord], val_fraction: float):
    """Deterministic train/val split: the last ceil(fraction·n) of the sorted
    video ids become validation."""
    videos = sorted({r.video_id for r in records})
    if not videos:
        raise DegenerateInputError("no records to split")
    n_val = min(len(videos) - 1, max(1, round(val_fraction * len(videos)))) if val_fraction > 0 else 0
    val_set = set(videos[len(videos) - n_val:])
    train = [r for r in records if r.video_id not in val_set]
    val = [r for r in records if r.video_id in val_set]
    return train, val


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Generator constants, tuned so the corpus is learnable at desk scale. The
# latent point moves in polar coordinates: the angle (which fully determines
# the expression octant and the AU probe signs) drifts fast enough to cover
# all octants per corpus, while the radius drifts slowly on an annulus.
# Features encode the angle crisply (through the AU bits) but the radius only
# through damped noisy channels, so per-frame valence/arousal regression is
# noise-limited and temporal aggregation has signal left to recover.
_ANGLE_STEP = 0.15
_RADIUS_STEP = 0.05
_RADIUS_MIN = 0.12
_AU_PROBE_NOISE = 0.02
_FEATURE_NOISE = 0.25
_VA_CHANNEL_GAIN = 0.5


@dataclass(frozen=True)
class SentinelRates:
    """Per-task probabilities of replacing labels with their sentinel."""

    va: float = 0.0
    expr: float = 0.0
    au: float = 0.0


def _octant(v: float, a: float) -> int:
    ang = np.arctan2(a, v)  # [-pi, pi]
    k = int((ang + np.pi) // (np.pi / 4.0))
    return min(k, NUM_EXPRESSIONS - 1)


def synth_corpus(seed: int, num_videos: int = 8, frames_per_video: int = 500,
                 input_dim: int = 16, sentinel_rates: SentinelRates = SentinelRates()):
    """Generate (records, features) with known structure.

    Each video runs a smooth random walk over latent (valence, arousal): the
    angle of the latent point drifts freely while its radius drifts on an
    annulus, keeping every frame inside [-1, 1]². Expressions are the octant
    of the latent point; each action unit thresholds its own fixed linear
    probe of the latent point plus noise, with probe directions evenly spaced
    so the bit pattern pins down the octant; frame features are a fixed
    linear embedding of (damped latent, AU bits) plus noise, so every label
    family is learnable from features while single-frame valence/arousal
    stays noise-limited.
    """
    if input_dim < 2 + NUM_AUS:
        raise DegenerateInputError(f"input_dim {input_dim} < {2 + NUM_AUS}")
    rng = np.random.default_rng(seed)
    probe_angles = np.pi * np.arange(NUM_AUS) / NUM_AUS
    probe_w = np.stack([np.cos(probe_angles), np.sin(probe_angles)], axis=1)
    # Orthonormal embedding columns keep every latent channel linearly
    # recoverable at exactly the feature-noise level.
    embed, _ = np.linalg.qr(rng.normal(size=(input_dim, 2 + NUM_AUS)))

    records = []
    features = {}
    for vi in range(num_videos):
        vid = f"v{vi:03d}"
        theta = rng.uniform(-np.pi, np.pi)
        radius = rng.uniform(_RADIUS_MIN, 1.0)
        for fi in range(frames_per_video):
            theta += rng.normal(0.0, _ANGLE_STEP)
            radius += rng.normal(0.0, _RADIUS_STEP)
            while radius < _RADIUS_MIN or radius > 1.0:  # reflect into the annulus
                radius = 2 * (_RADIUS_MIN if radius < _RADIUS_MIN else 1.0) - radius
            v = float(radius * np.cos(theta))
            a = float(radius * np.sin(theta))
            aus = (probe_w @ np.array([v, a])
                   + rng.normal(0.0, _AU_PROBE_NOISE, NUM_AUS) > 0).astype(int)
            latent = np.concatenate([[_VA_CHANNEL_GAIN * v, _VA_CHANNEL_GAIN * a], aus])
            features[(vid, fi)] = embed @ latent + rng.normal(0.0, _FEATURE_NOISE, input_dim)

            valence, arousal = v, a
            expression = _octant(v, a)
            au_labels = tuple(int(x) for x in aus)
            if rng.random() < sentinel_rates.va:
                valence = arousal = VA_SENTINEL
            if rng.random() < sentinel_rates.expr:
                expression = EXPR_SENTINEL
            if rng.random() < sentinel_rates.au:
                au_labels = (AU_SENTINEL,) * NUM_AUS
            records.append(AnnotationRecord(vid, fi, valence, arousal, expression, au_labels))
    return records, features


def synth_generate(out_dir: str | Path, seed: int, num_videos: int = 8,
                   frames_per_video: int = 500, input_dim: int = 16,
                   sentinel_rates: SentinelRates = SentinelRates()) -> tuple[Path, Path]:
    """Generate a corpus and write annotations.csv + features.bin to out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, features = synth_corpus(seed, num_videos, frames_per_video,
                                     input_dim, sentinel_rates)
    ann = out / "annotations.csv"
    feat = out / "features.bin"
    serialize_annotations(records, ann)
    write_features(features, feat)
    return ann, feat


def load_corpus(data_dir: str | Path):
    """Read annotations.csv + features.bin from a data directory; dedup."""
    data_dir = Path(data_dir)
    records = parse_annotations(data_dir / "annotations.csv")
    records, _ = dedup(records)
    features = read_features(data_dir / "features.bin")
    return records, features
