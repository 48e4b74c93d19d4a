"""Synthetic usage cubes from planted factors, with labeled anomaly injections."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .anomaly import AnomalyScoreSeries, Event, flag, parse_method
from .cube import UsageCube
from .model import LatentModel

SHAPES = ("spike", "level_shift")
DEFAULT_T0 = 1362100201
DEFAULT_STEP = 600
TRUTH_HEADER = ("timestamp", "node", "injection")


@dataclass(frozen=True)
class Injection:
    """An additive anomaly, sized in multiples of the spec's noise std.

    A ``spike`` covers timesteps ``[t_start, t_stop)``; a
    ``level_shift`` persists from ``t_start`` to the end of the series.
    """

    node: int
    t_start: int
    t_stop: Optional[int] = None
    metrics: Optional[tuple] = None  # None means every metric
    magnitude: float = 8.0
    shape: str = "spike"

    def time_range(self, T: int) -> range:
        if self.shape == "level_shift":
            return range(self.t_start, T)
        stop = self.t_start + 1 if self.t_stop is None else self.t_stop
        return range(self.t_start, stop)


@dataclass(frozen=True)
class SynthSpec:
    N: int
    M: int
    T: int
    K_true: int
    noise_std: float = 0.1
    injections: tuple = ()
    seed: int = 0
    static_mean: float = 0.0
    static_std: float = 1.0
    metric_mean: float = 0.0
    metric_std: float = 1.0
    dynamic_mean: float = 1.0
    dynamic_std: float = 0.2
    t0: int = DEFAULT_T0
    step: int = DEFAULT_STEP

    def __post_init__(self):
        if min(self.N, self.M, self.T, self.K_true) < 1:
            raise ValueError("N, M, T and K_true must all be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        injections = tuple(i if isinstance(i, Injection) else Injection(**i) for i in self.injections)
        for inj in injections:
            if inj.shape not in SHAPES:
                raise ValueError(f"injection shape must be one of {SHAPES}, got {inj.shape!r}")
            if not 0 <= inj.node < self.N:
                raise ValueError(f"injection node {inj.node} out of range")
            rng_t = inj.time_range(self.T)
            if not (0 <= inj.t_start < self.T) or len(rng_t) == 0 or rng_t.stop > self.T:
                raise ValueError(f"injection time range [{inj.t_start}, {inj.t_stop}) out of range")
            if inj.metrics is not None:
                metrics = tuple(int(m) for m in inj.metrics)
                if not metrics or not all(0 <= m < self.M for m in metrics):
                    raise ValueError(f"injection metrics {inj.metrics} out of range")
        object.__setattr__(self, "injections", injections)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        """Build a spec from parsed JSON.

        Besides the dataclass fields, ``random_injections`` may hold keyword
        arguments for :func:`random_injections`; those are drawn from the
        spec's seed and appended to any explicit ``injections``.
        """
        data = dict(data)
        extra = data.pop("random_injections", None)
        injections = [Injection(**{**i, "metrics": None if i.get("metrics") is None else tuple(i["metrics"])})
                      for i in data.pop("injections", [])]
        if extra:
            injections += random_injections(
                data["N"], data["M"], data["T"], seed=[data.get("seed", 0), 2], **extra,
            )
        return cls(injections=tuple(injections), **data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injections"] = [
            {**asdict(i), "metrics": None if i.metrics is None else list(i.metrics)} for i in self.injections
        ]
        return d


@dataclass(eq=False)
class GroundTruth:
    node_ids: tuple
    timestamps: np.ndarray
    cells: np.ndarray  # (T, N) bool, true where any injection applies
    injections: tuple = ()
    # per injected cell: index of the first injection covering it, else -1
    source: Optional[np.ndarray] = None

    @property
    def n_positive(self) -> int:
        return int(self.cells.sum())


def random_injections(N, M, T, count=20, magnitude=8.0, duration=5, metric_fraction=0.5,
                      shape="spike", seed=0) -> list:
    """Place ``count`` injections on distinct nodes (while nodes last).

    Each touches a random subset of ``max(1, round(metric_fraction * M))``
    metrics over ``duration`` timesteps.
    """
    rng = np.random.default_rng(seed)
    n_metrics = max(1, int(round(metric_fraction * M)))
    duration = min(duration, T)
    nodes = rng.permutation(N)
    out = []
    for i in range(count):
        node = int(nodes[i % N])
        t_start = int(rng.integers(0, T - duration + 1))
        metrics = tuple(sorted(int(m) for m in rng.choice(M, size=n_metrics, replace=False)))
        out.append(Injection(node, t_start, t_start + duration if shape == "spike" else None,
                             metrics, float(magnitude), shape))
    return out


def standard_benchmark(seed: int = 0) -> SynthSpec:
    """50 nodes, 20 metrics, 200 steps, K_true=5, noise 0.1, 20 spikes at 8 sigma."""
    return SynthSpec(
        N=50, M=20, T=200, K_true=5, noise_std=0.1, seed=seed,
        injections=tuple(random_injections(50, 20, 200, count=20, magnitude=8.0, duration=5, seed=[seed, 2])),
    )


def generate(spec: SynthSpec):
    """Return ``(cube, planted_model, truth)`` for ``spec``.

    The cube is the planted model's reconstruction plus i.i.d.
    Normal(0, noise_std**2) noise plus the injections. It is not
    normalized: injections are sized relative to the noise scale.
    """
    rng = np.random.default_rng(spec.seed)
    N, M, T, K = spec.N, spec.M, spec.T, spec.K_true
    U_bar = rng.normal(spec.static_mean, spec.static_std, size=(N, K))
    V = rng.normal(spec.metric_mean, spec.metric_std, size=(M, K))
    U_hat = rng.normal(spec.dynamic_mean, spec.dynamic_std, size=(T, N, K))
    node_ids = tuple(f"node{n:0{len(str(N - 1))}d}" for n in range(N))
    metric_ids = tuple(f"metric{m:0{len(str(M - 1))}d}" for m in range(M))
    timestamps = spec.t0 + spec.step * np.arange(T, dtype=np.int64)
    planted = LatentModel(U_bar, V, U_hat, node_ids, metric_ids, timestamps)

    values = planted.reconstruct()
    if spec.noise_std > 0:
        values = values + rng.normal(0.0, spec.noise_std, size=values.shape)

    cells = np.zeros((T, N), dtype=bool)
    source = np.full((T, N), -1, dtype=np.int64)
    for i, inj in enumerate(spec.injections):
        times = list(inj.time_range(T))
        metrics = list(range(M)) if inj.metrics is None else list(inj.metrics)
        values[np.ix_(times, [inj.node], metrics)] += inj.magnitude * spec.noise_std
        for t in times:
            if not cells[t, inj.node]:
                source[t, inj.node] = i
            cells[t, inj.node] = True

    cube = UsageCube(node_ids, metric_ids, timestamps, values)
    truth = GroundTruth(node_ids, timestamps, cells, spec.injections, source)
    return cube, planted, truth


# -- evaluation ---------------------------------------------------------------

def roc_auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Mann-Whitney AUC; tied scores count one half. None without both classes."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def false_alarms_at_recall(scores: np.ndarray, labels: np.ndarray, recall: float) -> tuple:
    """Lowest-threshold-free operating point reaching ``recall``.

    Cells are flagged from the highest score down, whole tie groups at a
    time, until at least ``recall`` of the positives are flagged. Returns
    ``(false_alarms, achieved_recall, threshold)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # only cut at the end of a tie group
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    need = recall * n_pos
    for e in ends:
        if tp[e] >= need - 1e-12:
            return int(e + 1 - tp[e]), float(tp[e] / n_pos), float(s[e])
    e = ends[-1]
    return int(e + 1 - tp[e]), float(tp[e] / n_pos), float(s[e])


@dataclass
class ThresholdMetrics:
    method: str
    threshold: float
    n_flagged: int
    true_positives: int
    false_alarms: int
    precision: Optional[float]
    recall: Optional[float]
    false_alarms_per_node_day: Optional[float]


@dataclass
class DetectorReport:
    auc: Optional[float]
    n_cells: int
    n_positive: int
    thresholds: list = field(default_factory=list)


def _aligned_truth(scores: AnomalyScoreSeries, truth: GroundTruth) -> np.ndarray:
    if tuple(truth.node_ids) == scores.node_ids and np.array_equal(truth.timestamps, scores.timestamps):
        return truth.cells
    n_index = {n: i for i, n in enumerate(scores.node_ids)}
    t_index = {int(t): i for i, t in enumerate(scores.timestamps)}
    if set(truth.node_ids) != set(n_index) or {int(t) for t in truth.timestamps} != set(t_index):
        raise ValueError("scores and ground truth cover different nodes or timestamps")
    cells = np.zeros(scores.scores.shape, dtype=bool)
    for t, ts in enumerate(truth.timestamps):
        for n, node in enumerate(truth.node_ids):
            cells[t_index[int(ts)], n_index[node]] = truth.cells[t, n]
    return cells


def _node_days(scores: AnomalyScoreSeries) -> Optional[float]:
    ts = scores.timestamps
    if len(ts) < 2:
        return None
    step = float(np.median(np.diff(ts)))
    return len(scores.node_ids) * len(ts) * step / 86400.0


def evaluate_detector(scores: AnomalyScoreSeries, truth: GroundTruth, methods: Sequence = ()) -> DetectorReport:
    """AUC over all cells plus precision/recall for each flagging method.

    If ``scores`` already carries flags they are evaluated first.
    """
    labels = _aligned_truth(scores, truth)
    auc = roc_auc(scores.scores, labels)
    report = DetectorReport(auc, labels.size, int(labels.sum()))
    node_days = _node_days(scores)

    flagged = []
    if scores.flags is not None:
        flagged.append(scores)
    for method in methods:
        parse_method(method)
        flagged.append(flag(scores, method))
    for s in flagged:
        n_flagged = int(s.flags.sum())
        tp = int((s.flags & labels).sum())
        fa = n_flagged - tp
        report.thresholds.append(ThresholdMetrics(
            method=s.method or "given",
            threshold=s.threshold,
            n_flagged=n_flagged,
            true_positives=tp,
            false_alarms=fa,
            precision=tp / n_flagged if n_flagged else None,
            recall=tp / report.n_positive if report.n_positive else None,
            false_alarms_per_node_day=fa / node_days if node_days else None,
        ))
    return report


# -- file formats -------------------------------------------------------------

def load_spec(path) -> SynthSpec:
    with open(path, encoding="utf-8") as fh:
        return SynthSpec.from_dict(json.load(fh))


def write_truth(truth: GroundTruth, path) -> None:
    """Write injected cells as ``timestamp,node,injection``, sorted."""
    order = sorted(range(len(truth.node_ids)), key=lambda n: truth.node_ids[n])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_HEADER)
        for t, ts in enumerate(truth.timestamps.tolist()):
            for n in order:
                if truth.cells[t, n]:
                    src = -1 if truth.source is None else int(truth.source[t, n])
                    writer.writerow((ts, truth.node_ids[n], src))


def read_truth(path, like: AnomalyScoreSeries) -> GroundTruth:
    """Read a truth CSV onto the (node, timestamp) grid of ``like``."""
    n_index = {n: i for i, n in enumerate(like.node_ids)}
    t_index = {int(t): i for i, t in enumerate(like.timestamps)}
    cells = np.zeros(like.scores.shape, dtype=bool)
    source = np.full(like.scores.shape, -1, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRUTH_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRUTH_HEADER)}")
        for row in reader:
            if not row:
                continue
            ts, node = int(row[0]), row[1]
            if node not in n_index or ts not in t_index:
                raise ValueError(f"{path}: line {reader.line_num}: cell ({ts}, {node}) not in scores")
            cells[t_index[ts], n_index[node]] = True
            source[t_index[ts], n_index[node]] = int(row[2])
    return GroundTruth(like.node_ids, like.timestamps, cells, (), source)


def write_metrics(report: DetectorReport, path) -> None:
    cols = ("auc", "n_cells", "n_positive", "method", "threshold", "n_flagged", "true_positives",
            "false_alarms", "precision", "recall", "false_alarms_per_node_day")
    fmt = lambda x: "" if x is None else (repr(x) if isinstance(x, float) else x)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        base = (fmt(report.auc), report.n_cells, report.n_positive)
        if not report.thresholds:
            writer.writerow(base + ("",) * 8)
        for m in report.thresholds:
            writer.writerow(base + (m.method, fmt(m.threshold), m.n_flagged, m.true_positives, m.false_alarms,
                                    fmt(m.precision), fmt(m.recall), fmt(m.false_alarms_per_node_day)))


# -- event planting -------------------------------------------------------------

def events_at_injections(truth: GroundTruth, error_type: str = "segfault", offset: int = 0) -> list:
    """One event per injection, at its first timestep (plus ``offset`` seconds)."""
    return [
        Event(truth.node_ids[inj.node], int(truth.timestamps[inj.t_start]) + offset, error_type)
        for inj in truth.injections
    ]


def random_events(node_ids, timestamps, count: int, seed=0, error_type: str = "write_error") -> list:
    """Events on uniformly random nodes at uniformly random integer times within the series span."""
    rng = np.random.default_rng(seed)
    nodes = rng.integers(0, len(node_ids), size=count)
    times = rng.integers(int(timestamps[0]), int(timestamps[-1]) + 1, size=count)
    return [Event(node_ids[int(n)], int(t), error_type) for n, t in zip(nodes, times)]
