"""Motion datasets, the synthetic sinusoid generator, the angle-space error
metric, the zero-velocity baseline, and the evaluation harness.

Dataset directory layout: a `manifest.tsv` with columns
(file, subject, action, frame_period_ms, pose_dim) plus one CSV per sequence,
one frame per row, written as decimal text with 17 significant digits so a
save/load cycle is exact.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import mdp

__all__ = [
    "MotionDataset",
    "DatasetError",
    "HorizonSet",
    "ErrorTable",
    "load_dataset",
    "save_dataset",
    "sample_trajectories",
    "gen_synthetic",
    "mean_angle_error",
    "zero_velocity",
    "evaluate",
]

MANIFEST = "manifest.tsv"
_MANIFEST_COLUMNS = ("file", "subject", "action", "frame_period_ms", "pose_dim")


class DatasetError(Exception):
    pass


@dataclass
class MotionDataset:
    sequences: list
    subjects: list
    actions: list
    frame_period_ms: int
    pose_dim: int

    def __post_init__(self):
        if len(self.sequences) != len(self.subjects) or len(self.sequences) != len(self.actions):
            raise DatasetError("sequence/metadata counts differ")
        for i, seq in enumerate(self.sequences):
            if seq.ndim != 2 or seq.shape[1] != self.pose_dim:
                raise DatasetError(
                    f"sequence {i} has shape {seq.shape}, expected (*, {self.pose_dim})"
                )

    def __len__(self):
        return len(self.sequences)


def save_dataset(ds: MotionDataset, path, force: bool = False):
    os.makedirs(path, exist_ok=True)
    manifest = os.path.join(path, MANIFEST)
    if os.path.exists(manifest) and not force:
        raise DatasetError(f"refusing to overwrite existing dataset at {path}")
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for i, seq in enumerate(ds.sequences):
        fname = f"seq{i:04d}.csv"
        lines.append(
            f"{fname}\t{ds.subjects[i]}\t{ds.actions[i]}\t{ds.frame_period_ms}\t{ds.pose_dim}"
        )
        rows = "\n".join(",".join(f"{v:.17g}" for v in frame) for frame in seq)
        with open(os.path.join(path, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(rows + "\n")
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_sequence(path, fname, pose_dim):
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != pose_dim:
                raise DatasetError(
                    f"{fname}:{lineno}: row has {len(cells)} values, expected {pose_dim}"
                )
            try:
                frames.append([float(c) for c in cells])
            except ValueError:
                raise DatasetError(f"{fname}:{lineno}: non-numeric cell") from None
    if not frames:
        raise DatasetError(f"{fname}: sequence file is empty")
    return np.asarray(frames, dtype=np.float64)


def load_dataset(path) -> MotionDataset:
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        raise DatasetError(f"missing manifest: {manifest}")
    with open(manifest, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != _MANIFEST_COLUMNS:
        raise DatasetError("manifest header does not match expected columns")
    sequences, subjects, actions = [], [], []
    period = pose_dim = None
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(_MANIFEST_COLUMNS):
            raise DatasetError(f"manifest line {lineno}: expected {len(_MANIFEST_COLUMNS)} columns")
        fname, subject, action, period_s, dim_s = cells
        try:
            this_period, this_dim = int(period_s), int(dim_s)
        except ValueError:
            raise DatasetError(f"manifest line {lineno}: non-integer period or pose_dim") from None
        if period is None:
            period, pose_dim = this_period, this_dim
        elif this_period != period or this_dim != pose_dim:
            raise DatasetError(
                f"manifest line {lineno}: frame period or pose_dim disagrees with earlier rows"
            )
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            raise DatasetError(f"manifest references missing file: {fname}")
        sequences.append(_parse_sequence(fpath, fname, pose_dim))
        subjects.append(subject)
        actions.append(action)
    if not sequences:
        raise DatasetError("manifest lists no sequences")
    return MotionDataset(sequences, subjects, actions, period, pose_dim)


def sample_trajectories(ds: MotionDataset, span: int, n: int, rng: np.random.Generator,
                        return_positions: bool = False):
    """Draw n length-span windows uniformly over all valid (sequence, offset)
    positions; returns an (n, span, pose_dim) array, plus the positions when
    asked (used by divergence diagnostics).
    """
    counts = [max(0, seq.shape[0] - span + 1) for seq in ds.sequences]
    total = sum(counts)
    if total == 0:
        raise DatasetError(f"no sequence admits a span of {span} frames")
    bounds = np.cumsum(counts)
    picks = rng.integers(0, total, size=n)
    out = np.empty((n, span, ds.pose_dim), dtype=np.float64)
    positions = []
    for j, pick in enumerate(picks):
        seq_i = int(np.searchsorted(bounds, pick, side="right"))
        start = int(pick - (bounds[seq_i - 1] if seq_i else 0))
        out[j] = ds.sequences[seq_i][start : start + span]
        positions.append((seq_i, start))
    if return_positions:
        return out, positions
    return out


def gen_synthetic(n_seqs: int, length: int, pose_dim: int, seed: int,
                  frame_period_ms: int = 40, n_actions: int = 1) -> MotionDataset:
    """Deterministic sinusoid motions: per sequence and dimension,
    A*sin(w*n + phi) + B with A in [0.2, 1], w in [0.05, 0.5] rad/frame,
    phi in [0, 2pi), B in [-0.5, 0.5], all from the seeded generator.
    """
    if n_seqs < 1 or length < 1 or pose_dim < 1 or n_actions < 1:
        raise ValueError("n_seqs, length, pose_dim and n_actions must be positive")
    rng = np.random.default_rng(seed)
    n = np.arange(length, dtype=np.float64)
    sequences = []
    for _ in range(n_seqs):
        dims = []
        for _ in range(pose_dim):
            amp = rng.uniform(0.2, 1.0)
            omega = rng.uniform(0.05, 0.5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            offset = rng.uniform(-0.5, 0.5)
            dims.append(amp * np.sin(omega * n + phase) + offset)
        sequences.append(np.stack(dims, axis=1))
    subjects = ["synth"] * n_seqs
    actions = [f"synthetic-{i % n_actions:02d}" for i in range(n_seqs)]
    return MotionDataset(sequences, subjects, actions, frame_period_ms, pose_dim)


@dataclass(frozen=True)
class HorizonSet:
    """Evaluation horizons in milliseconds with their frame indices."""

    horizons_ms: tuple
    frame_period_ms: int
    frame_counts: tuple = field(init=False)

    def __post_init__(self):
        horizons = tuple(int(h) for h in self.horizons_ms)
        if not horizons:
            raise ValueError("at least one horizon is required")
        for h in horizons:
            if h <= 0 or h % self.frame_period_ms != 0:
                raise ValueError(
                    f"horizon {h} ms is not a positive multiple of the "
                    f"{self.frame_period_ms} ms frame period"
                )
        object.__setattr__(self, "horizons_ms", horizons)
        object.__setattr__(
            self, "frame_counts", tuple(h // self.frame_period_ms for h in horizons)
        )


def mean_angle_error(predicted, truth, horizons: HorizonSet) -> dict:
    """Per-horizon Euclidean distance in angle space at the horizon's frame."""
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(truth, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2:
        raise ValueError(f"predicted {p.shape} and truth {g.shape} must be equal (l, d) shapes")
    out = {}
    for ms, fc in zip(horizons.horizons_ms, horizons.frame_counts):
        if fc > p.shape[0]:
            raise ValueError(f"horizon {ms} ms needs frame {fc}, beyond the {p.shape[0]} predicted")
        diff = p[fc - 1] - g[fc - 1]
        out[ms] = float(np.sqrt((diff * diff).sum()))
    return out


def zero_velocity(prefix, l: int) -> np.ndarray:
    """The baseline forecast: repeat the last observed frame l times."""
    arr = np.asarray(prefix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("prefix must contain at least one frame")
    return np.repeat(arr[-1:], l, axis=0)


def zero_velocity_policy(m: int):
    """A State -> Action policy wrapping the baseline, for rollout/evaluate."""

    def policy(state):
        return np.repeat(state[-1:], m, axis=0)

    return policy


class ErrorTable:
    """(action, horizon) -> mean angle error, with CSV round trip."""

    def __init__(self, rows: dict | None = None):
        self.rows = dict(rows or {})

    def __eq__(self, other):
        return isinstance(other, ErrorTable) and self.rows == other.rows

    def sorted_items(self):
        return sorted(self.rows.items())

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("action,horizon_ms,mean_angle_error\n")
            for (action, ms), err in self.sorted_items():
                fh.write(f"{action},{ms},{err:.17g}\n")

    @classmethod
    def from_csv(cls, path):
        rows = {}
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "action,horizon_ms,mean_angle_error":
                raise DatasetError(f"{path}: unexpected error-table header")
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                try:
                    action, ms, err = line.split(",")
                    rows[(action, int(ms))] = float(err)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: malformed error-table row") from None
        return cls(rows)

    def compare(self, other: "ErrorTable"):
        """Merge with another table; rows gain (self, other, self-other)."""
        keys = sorted(set(self.rows) | set(other.rows))
        merged = []
        for key in keys:
            a = self.rows.get(key)
            b = other.rows.get(key)
            delta = None if a is None or b is None else a - b
            merged.append((key[0], key[1], a, b, delta))
        return merged

    @staticmethod
    def write_comparison(merged, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("action,horizon_ms,mean_angle_error,compare_error,delta\n")
            for action, ms, a, b, delta in merged:
                cells = [
                    action,
                    str(ms),
                    "" if a is None else f"{a:.17g}",
                    "" if b is None else f"{b:.17g}",
                    "" if delta is None else f"{delta:.17g}",
                ]
                fh.write(",".join(cells) + "\n")


def _canonical_sequence_order(ds: MotionDataset):
    """Storage-order-independent ordering: by action, subject, length, digest."""
    keys = []
    for i, seq in enumerate(ds.sequences):
        digest = hashlib.sha1(np.ascontiguousarray(seq).tobytes()).hexdigest()
        keys.append((ds.actions[i], ds.subjects[i], seq.shape[0], digest, i))
    return [k[-1] for k in sorted(keys)]


def evaluate(policy, ds: MotionDataset, cfg: mdp.EpisodeConfig, horizons: HorizonSet,
             *, windows_per_action: int = 128, seed: int = 0) -> ErrorTable:
    """Roll the policy out over every valid window (or a seeded subsample of
    fixed size per action) and average the per-horizon error per action.
    """
    for fc, ms in zip(horizons.frame_counts, horizons.horizons_ms):
        if fc > cfg.l:
            raise ValueError(f"horizon {ms} ms needs frame {fc}, beyond prediction length {cfg.l}")
    windows_by_action: dict[str, list] = {}
    for i in _canonical_sequence_order(ds):
        seq = ds.sequences[i]
        for start in range(0, seq.shape[0] - cfg.span + 1):
            windows_by_action.setdefault(ds.actions[i], []).append((i, start))
    if not windows_by_action:
        raise DatasetError(f"test set has no window of span {cfg.span}")

    rows = {}
    for action in sorted(windows_by_action):
        windows = windows_by_action[action]
        if windows_per_action and len(windows) > windows_per_action:
            rng = np.random.default_rng(seed)
            chosen = rng.choice(len(windows), size=windows_per_action, replace=False)
            windows = [windows[j] for j in sorted(chosen)]
        sums = {ms: 0.0 for ms in horizons.horizons_ms}
        for seq_i, start in windows:
            seq = ds.sequences[seq_i]
            prefix = seq[start : start + cfg.t]
            truth = seq[start + cfg.t : start + cfg.span]
            pred = mdp.rollout(policy, prefix, cfg)
            for ms, err in mean_angle_error(pred, truth, horizons).items():
                sums[ms] += err
        for ms in horizons.horizons_ms:
            rows[(action, ms)] = sums[ms] / len(windows)
    return ErrorTable(rows)
