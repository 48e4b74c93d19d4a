"""Per-node, per-timestep anomaly scores and their alignment with log events."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cube import UsageCube
from .model import LatentModel, residuals

DEFAULT_WINDOW = 600
KNOWN_ERROR_TYPES = ("write_error", "segfault", "inode_error")
SCORES_HEADER = ("timestamp", "node", "score", "flag")
EVENTS_HEADER = ("timestamp", "node", "error_type")


@dataclass(eq=False)
class AnomalyScoreSeries:
    node_ids: tuple
    timestamps: np.ndarray
    scores: np.ndarray  # (T, N)
    threshold: Optional[float] = None
    flags: Optional[np.ndarray] = None
    # cells with every metric masked; their score is 0 and never flagged
    unscorable: Optional[np.ndarray] = None
    method: Optional[str] = None

    def __post_init__(self):
        self.node_ids = tuple(self.node_ids)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.timestamps), len(self.node_ids)):
            raise ValueError("scores must be (T, N) matching timestamps and node_ids")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and non-negative")
        if self.unscorable is None:
            self.unscorable = np.zeros(self.scores.shape, dtype=bool)
        if (self.threshold is None) != (self.flags is None):
            raise ValueError("threshold and flags must be given together")
        if self.flags is not None:
            self.flags = np.asarray(self.flags, dtype=bool)

    @property
    def flag_rate(self) -> float:
        """Fraction of scorable cells that are flagged."""
        if self.flags is None:
            raise ValueError("series has not been flagged")
        scorable = ~self.unscorable
        return float(self.flags[scorable].mean()) if scorable.any() else 0.0


def scores_from_residuals(res: np.ndarray, observed: np.ndarray, node_ids, timestamps) -> AnomalyScoreSeries:
    """Mean absolute residual over observed metrics, per (t, n)."""
    counts = observed.sum(axis=2)
    total = np.where(observed, np.abs(res), 0.0).sum(axis=2)
    unscorable = counts == 0
    scores = total / np.maximum(counts, 1)
    return AnomalyScoreSeries(node_ids, timestamps, scores, unscorable=unscorable)


def score(model: LatentModel, cube: UsageCube) -> AnomalyScoreSeries:
    """Mean absolute residual of the model over each node's metrics at each time."""
    return scores_from_residuals(residuals(model, cube), cube.observed, cube.node_ids, cube.timestamps)


def parse_method(method) -> tuple:
    """Parse ``"quantile:0.99"`` / ``"zscore:3"`` (or an equivalent tuple)."""
    if isinstance(method, str):
        kind, sep, arg = method.partition(":")
        if not sep:
            raise ValueError(f"flag method must look like quantile:<q> or zscore:<k>, got {method!r}")
        method = (kind.strip(), float(arg))
    kind, arg = method
    arg = float(arg)
    if kind == "quantile":
        if not 0 < arg < 1:
            raise ValueError(f"quantile must lie in (0, 1), got {arg}")
    elif kind == "zscore":
        if not arg > 0:
            raise ValueError(f"zscore multiplier must be > 0, got {arg}")
    else:
        raise ValueError(f"unknown flag method {kind!r}")
    return kind, arg


def flag(scores: AnomalyScoreSeries, method) -> AnomalyScoreSeries:
    """Set a threshold and flag cells whose score is strictly above it.

    ``quantile:q`` uses the linearly interpolated q-th quantile of the
    scorable scores; ``zscore:k`` uses mean + k * (population) std.
    """
    kind, arg = parse_method(method)
    pool = scores.scores[~scores.unscorable]
    if pool.size == 0:
        raise ValueError("no scorable cells to threshold")
    if kind == "quantile":
        threshold = float(np.quantile(pool, arg, method="linear"))
    else:
        threshold = float(pool.mean() + arg * pool.std())
    flags = (scores.scores > threshold) & ~scores.unscorable
    return replace(scores, threshold=threshold, flags=flags, method=f"{kind}:{arg:g}")


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    node_id: str
    timestamp: int
    error_type: str

    @property
    def category(self) -> str:
        return self.error_type if self.error_type in KNOWN_ERROR_TYPES else "other"


def load_events(path) -> list:
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENTS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EVENTS_HEADER)}")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: line {reader.line_num}: expected 3 fields")
            try:
                ts = int(row[0])
            except ValueError:
                raise ValueError(f"{path}: line {reader.line_num}: bad timestamp {row[0]!r}") from None
            events.append(Event(row[1].strip(), ts, row[2].strip() or "other"))
    return events


def save_events(events: Sequence[Event], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENTS_HEADER)
        for e in sorted(events, key=lambda e: (e.timestamp, e.node_id, e.error_type)):
            writer.writerow((e.timestamp, e.node_id, e.error_type))


@dataclass
class EventAlignment:
    event: Event
    time_indices: list
    max_score: Optional[float]
    flagged: Optional[bool]


@dataclass
class TypeSummary:
    error_type: str
    n_events: int
    n_aligned: int
    cooccurrence_rate: Optional[float]
    event_score_mean: Optional[float]
    event_score_median: Optional[float]
    background_score_mean: float
    background_score_median: float


@dataclass
class AlignmentReport:
    window: float
    alignments: list
    summary: dict
    unresolved: list = field(default_factory=list)
    base_flag_rate: Optional[float] = None


def align_events(scores: AnomalyScoreSeries, events: Sequence[Event], window: float = DEFAULT_WINDOW) -> AlignmentReport:
    """Match each event to the scored timesteps within ``window`` seconds.

    The window is symmetric and inclusive: timestep ``t`` is matched when
    ``|timestamp_t - event_time| <= window``. An event co-occurs with a
    flag when any matched cell at its node is flagged. Events on nodes
    missing from ``scores`` are collected in ``unresolved``.
    """
    if not window > 0:
        raise ValueError(f"window must be > 0, got {window}")
    node_index = {n: i for i, n in enumerate(scores.node_ids)}
    ts = scores.timestamps
    scorable = ~scores.unscorable
    adjacent = np.zeros(scores.scores.shape, dtype=bool)

    alignments, unresolved = [], []
    for event in events:
        n = node_index.get(event.node_id)
        if n is None:
            unresolved.append(event)
            continue
        lo = np.searchsorted(ts, event.timestamp - window, side="left")
        hi = np.searchsorted(ts, event.timestamp + window, side="right")
        idx = [t for t in range(lo, hi) if scorable[t, n]]
        adjacent[lo:hi, n] = True
        if idx:
            max_score = float(scores.scores[idx, n].max())
            flagged = None if scores.flags is None else bool(scores.flags[idx, n].any())
        else:
            max_score, flagged = None, None
        alignments.append(EventAlignment(event, idx, max_score, flagged))

    background = scores.scores[scorable & ~adjacent]
    bg_mean = float(background.mean()) if background.size else float("nan")
    bg_median = float(np.median(background)) if background.size else float("nan")

    summary = {}
    for etype in sorted({a.event.error_type for a in alignments} | {e.error_type for e in unresolved}):
        group = [a for a in alignments if a.event.error_type == etype]
        aligned = [a for a in group if a.time_indices]
        flagged = [a.flagged for a in aligned if a.flagged is not None]
        event_scores = [a.max_score for a in aligned]
        n_total = len(group) + sum(1 for e in unresolved if e.error_type == etype)
        summary[etype] = TypeSummary(
            error_type=etype,
            n_events=n_total,
            n_aligned=len(aligned),
            cooccurrence_rate=float(np.mean(flagged)) if flagged else None,
            event_score_mean=float(np.mean(event_scores)) if event_scores else None,
            event_score_median=float(np.median(event_scores)) if event_scores else None,
            background_score_mean=bg_mean,
            background_score_median=bg_median,
        )

    base = scores.flag_rate if scores.flags is not None else None
    return AlignmentReport(window, alignments, summary, unresolved, base)


# -- file formats -------------------------------------------------------------

def write_scores(scores: AnomalyScoreSeries, path) -> None:
    """Write ``timestamp,node,score,flag`` rows sorted by timestamp, then node.

    The flag column is ``1``/``0``, or empty when the series is unflagged.
    """
    order = sorted(range(len(scores.node_ids)), key=lambda n: scores.node_ids[n])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORES_HEADER)
        for t, ts in enumerate(scores.timestamps.tolist()):
            for n in order:
                fl = "" if scores.flags is None else int(scores.flags[t, n])
                writer.writerow((ts, scores.node_ids[n], repr(float(scores.scores[t, n])), fl))


def read_scores(path) -> AnomalyScoreSeries:
    """Read a scores CSV back into a series.

    When flags are present the threshold is recovered as the largest
    unflagged score, which reproduces the flags under the strict rule.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SCORES_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SCORES_HEADER)}")
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: line {reader.line_num}: expected 4 fields")
            rows.append((int(row[0]), row[1], float(row[2]), row[3].strip()))
    if not rows:
        raise ValueError(f"{path}: no score rows")

    timestamps = sorted({r[0] for r in rows})
    node_ids = sorted({r[1] for r in rows})
    t_index = {t: i for i, t in enumerate(timestamps)}
    n_index = {n: i for i, n in enumerate(node_ids)}
    values = np.zeros((len(timestamps), len(node_ids)))
    flags = np.zeros(values.shape, dtype=bool)
    seen = np.zeros(values.shape, dtype=bool)
    has_flags = {r[3] != "" for r in rows}
    if len(has_flags) != 1:
        raise ValueError(f"{path}: flag column must be filled for all rows or none")
    for ts, node, value, fl in rows:
        idx = (t_index[ts], n_index[node])
        if seen[idx]:
            raise ValueError(f"{path}: duplicate row for node={node}, timestamp={ts}")
        seen[idx] = True
        values[idx] = value
        flags[idx] = fl == "1"
    if not seen.all():
        raise ValueError(f"{path}: score grid is incomplete")

    if has_flags == {True}:
        unflagged = values[~flags]
        if unflagged.size:
            threshold = float(unflagged.max())
        else:
            threshold = float(np.nextafter(values.min(), -np.inf))
        return AnomalyScoreSeries(node_ids, timestamps, values, threshold, flags)
    return AnomalyScoreSeries(node_ids, timestamps, values)


def write_alignment(report: AlignmentReport, path, summary_path=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("timestamp", "node", "error_type", "resolved", "matched_timesteps", "max_score", "flag"))
        rows = [
            (a.event.timestamp, a.event.node_id, a.event.error_type, 1, len(a.time_indices),
             "" if a.max_score is None else repr(a.max_score),
             "" if a.flagged is None else int(a.flagged))
            for a in report.alignments
        ]
        rows += [(e.timestamp, e.node_id, e.error_type, 0, 0, "", "") for e in report.unresolved]
        writer.writerows(sorted(rows, key=lambda r: (r[0], r[1], r[2])))
    if summary_path is not None:
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow((
                "error_type", "n_events", "n_aligned", "cooccurrence_rate", "base_flag_rate",
                "event_score_mean", "event_score_median", "background_score_mean", "background_score_median",
            ))
            fmt = lambda x: "" if x is None else repr(x)
            for s in report.summary.values():
                writer.writerow((
                    s.error_type, s.n_events, s.n_aligned, fmt(s.cooccurrence_rate), fmt(report.base_flag_rate),
                    fmt(s.event_score_mean), fmt(s.event_score_median),
                    fmt(s.background_score_mean), fmt(s.background_score_median),
                ))
