"""Loading, validating, normalizing and persisting usage cubes.

A usage cube holds ``T`` slices of an ``N x M`` matrix: one value per
(node, metric, timestamp). Values are stored as a ``(T, N, M)`` array.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = "1"
LONG_HEADER = ("timestamp", "node", "metric", "value")

FORMATS = ("long", "wide")
MISSING_POLICIES = ("reject", "impute_zero")
NORMALIZATIONS = ("zscore", "none")


class IngestError(ValueError):
    """Raised when input data cannot be turned into a valid cube."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class UsageCube:
    node_ids: tuple
    metric_ids: tuple
    timestamps: np.ndarray
    values: np.ndarray
    mask: Optional[np.ndarray] = None
    # (means, stds), one entry per metric
    normalization: Optional[tuple] = None

    def __post_init__(self):
        node_ids = tuple(str(n) for n in self.node_ids)
        metric_ids = tuple(str(m) for m in self.metric_ids)
        timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"values must be (T, N, M), got shape {values.shape}")
        T, N, M = values.shape
        if N < 1 or M < 1 or T < 1:
            raise ValueError("cube needs at least one node, metric and timestamp")
        if (len(timestamps), len(node_ids), len(metric_ids)) != (T, N, M):
            raise ValueError(
                f"label lengths ({len(timestamps)}, {len(node_ids)}, {len(metric_ids)}) "
                f"do not match values shape {values.shape}"
            )
        if len(set(node_ids)) != N or len(set(metric_ids)) != M:
            raise ValueError("node and metric labels must be unique")
        if np.any(np.diff(timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape must match values")
            if mask.all():
                mask = None
        observed = values if mask is None else values[mask]
        if not np.all(np.isfinite(observed)):
            raise ValueError("observed values must be finite")
        norm = self.normalization
        if norm is not None:
            means, stds = (np.asarray(a, dtype=np.float64) for a in norm)
            if means.shape != (M,) or stds.shape != (M,):
                raise ValueError("normalization must hold one (mean, std) per metric")
            norm = (_frozen(means), _frozen(stds))

        object.__setattr__(self, "node_ids", node_ids)
        object.__setattr__(self, "metric_ids", metric_ids)
        object.__setattr__(self, "timestamps", _frozen(timestamps))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", None if mask is None else _frozen(mask))
        object.__setattr__(self, "normalization", norm)

    @property
    def shape(self) -> tuple:
        """``(T, N, M)``."""
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def M(self) -> int:
        return self.values.shape[2]

    @property
    def observed(self) -> np.ndarray:
        """Boolean ``(T, N, M)`` array, true where a value was observed."""
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.mask

    @property
    def is_normalized(self) -> bool:
        return self.normalization is not None

    def equals(self, other: "UsageCube", atol: float = 0.0) -> bool:
        if not isinstance(other, UsageCube):
            return False
        if (self.node_ids, self.metric_ids) != (other.node_ids, other.metric_ids):
            return False
        if self.shape != other.shape or not np.array_equal(self.timestamps, other.timestamps):
            return False
        if not np.array_equal(self.observed, other.observed):
            return False
        obs = self.observed
        return bool(np.all(np.abs(self.values[obs] - other.values[obs]) <= atol))


@dataclass(frozen=True)
class IngestConfig:
    format: str = "long"
    missing_policy: str = "reject"
    normalization: str = "none"
    # optional allow-lists; rows with labels outside them are rejected
    nodes: Optional[Sequence[str]] = field(default=None)
    metrics: Optional[Sequence[str]] = field(default=None)

    def __post_init__(self):
        policy = self.missing_policy.replace("-", "_")
        object.__setattr__(self, "missing_policy", policy)
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}, got {self.format!r}")
        if policy not in MISSING_POLICIES:
            raise ValueError(f"missing_policy must be one of {MISSING_POLICIES}, got {self.missing_policy!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")


def _parse_timestamp(text: str, line: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise IngestError(f"timestamp {text!r} is not an integer", line) from None


def _parse_value(text: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"value {text!r} is not a number", line) from None
    if not math.isfinite(value):
        raise IngestError(f"value {text!r} is not finite", line)
    return value


def _read_records(path: Path, config: IngestConfig):
    """Yield (line, timestamp, node, metric, value) from a long or wide CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path} is empty") from None
        if config.format == "long":
            if tuple(header) != LONG_HEADER:
                raise IngestError(f"expected header {','.join(LONG_HEADER)}, got {','.join(header)}", 1)
            metrics = None
        else:
            if header[:2] != ["timestamp", "node"] or len(header) < 3:
                raise IngestError("wide header must be timestamp,node,<metric>,...", 1)
            metrics = header[2:]
            if len(set(metrics)) != len(metrics) or any(not m for m in metrics):
                raise IngestError("wide header has empty or duplicate metric names", 1)

        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise IngestError(f"expected {width} fields, got {len(row)}", line)
            ts = _parse_timestamp(row[0], line)
            node = row[1].strip()
            if not node:
                raise IngestError("empty node label", line)
            if metrics is None:
                metric = row[2].strip()
                if not metric:
                    raise IngestError("empty metric label", line)
                yield line, ts, node, metric, _parse_value(row[3], line)
            else:
                for metric, text in zip(metrics, row[2:]):
                    if text.strip() == "":
                        continue
                    yield line, ts, node, metric, _parse_value(text, line)


def load_csv(path, config: Optional[IngestConfig] = None) -> UsageCube:
    """Read a long or wide CSV file into a :class:`UsageCube`.

    Node and metric labels are sorted; timestamps are sorted and shared
    across all rows. Every (node, metric, timestamp) triple may appear at
    most once. Cells absent from the file are an error under the
    ``reject`` policy and become masked zeros under ``impute_zero``.
    """
    config = config or IngestConfig()
    path = Path(path)
    allowed_nodes = None if config.nodes is None else set(config.nodes)
    allowed_metrics = None if config.metrics is None else set(config.metrics)

    cells: dict = {}
    for line, ts, node, metric, value in _read_records(path, config):
        if allowed_nodes is not None and node not in allowed_nodes:
            raise IngestError(f"unknown node {node!r}", line)
        if allowed_metrics is not None and metric not in allowed_metrics:
            raise IngestError(f"unknown metric {metric!r}", line)
        key = (node, metric, ts)
        if key in cells:
            prev_line, prev_value = cells[key]
            what = "conflicting values" if prev_value != value else "same value"
            raise IngestError(
                f"duplicate (node={node}, metric={metric}, timestamp={ts}) "
                f"first seen on line {prev_line} ({what})",
                line,
            )
        cells[key] = (line, value)

    if not cells:
        raise IngestError(f"{path} has no data rows")

    node_ids = sorted({k[0] for k in cells})
    metric_ids = sorted({k[1] for k in cells})
    timestamps = sorted({k[2] for k in cells})
    n_index = {n: i for i, n in enumerate(node_ids)}
    m_index = {m: i for i, m in enumerate(metric_ids)}
    t_index = {t: i for i, t in enumerate(timestamps)}

    shape = (len(timestamps), len(node_ids), len(metric_ids))
    values = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for (node, metric, ts), (_, value) in cells.items():
        idx = (t_index[ts], n_index[node], m_index[metric])
        values[idx] = value
        mask[idx] = True

    if not mask.all():
        if config.missing_policy == "reject":
            t, n, m = np.argwhere(~mask)[0]
            raise IngestError(
                f"missing value for node={node_ids[n]}, metric={metric_ids[m]}, "
                f"timestamp={timestamps[t]} ({int((~mask).sum())} cells missing in total)"
            )

    cube = UsageCube(node_ids, metric_ids, np.array(timestamps, dtype=np.int64), values, mask)
    if config.normalization == "zscore":
        cube = normalize(cube)
    return cube


def write_csv(cube: UsageCube, path, format: str = "long") -> None:
    """Write ``cube`` as a long or wide CSV, rows ordered by timestamp then node.

    Masked cells are omitted (long) or left empty (wide).
    """
    obs = cube.observed
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if format == "long":
            writer.writerow(LONG_HEADER)
            for t, ts in enumerate(cube.timestamps.tolist()):
                for n, node in enumerate(cube.node_ids):
                    for m, metric in enumerate(cube.metric_ids):
                        if obs[t, n, m]:
                            writer.writerow((ts, node, metric, repr(float(cube.values[t, n, m]))))
        elif format == "wide":
            writer.writerow(("timestamp", "node") + cube.metric_ids)
            for t, ts in enumerate(cube.timestamps.tolist()):
                for n, node in enumerate(cube.node_ids):
                    row = [repr(float(v)) if o else "" for v, o in zip(cube.values[t, n], obs[t, n])]
                    writer.writerow([ts, node] + row)
        else:
            raise ValueError(f"format must be one of {FORMATS}, got {format!r}")


def normalize(cube: UsageCube) -> UsageCube:
    """Z-score each metric over all observed (node, time) cells.

    Uses the population standard deviation. A constant metric gets
    ``std = 1`` so its values simply become 0. Masked cells stay 0.
    """
    if cube.is_normalized:
        raise ValueError("cube is already normalized")
    obs = cube.observed
    counts = obs.sum(axis=(0, 1))
    weights = obs.astype(np.float64)
    safe_counts = np.maximum(counts, 1)
    means = (cube.values * weights).sum(axis=(0, 1)) / safe_counts
    centered = (cube.values - means) * weights
    stds = np.sqrt((centered**2).sum(axis=(0, 1)) / safe_counts)
    stds[stds == 0] = 1.0
    values = centered / stds
    return replace(cube, values=values, normalization=(means, stds))


def denormalize(cube: UsageCube) -> UsageCube:
    """Undo :func:`normalize` using the stored per-metric constants."""
    if not cube.is_normalized:
        raise ValueError("cube is not normalized")
    means, stds = cube.normalization
    values = (cube.values * stds + means) * cube.observed
    return replace(cube, values=values, normalization=None)


# -- persistence -----------------------------------------------------------

def _write_matrix(path: Path, matrix: np.ndarray, fmt=repr) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in matrix.tolist():
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _read_matrix(path: Path, dtype=np.float64) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return np.array(rows, dtype=dtype)


def save_cube(cube: UsageCube, path, storage: str = "csv") -> None:
    """Persist ``cube`` to directory ``path``.

    ``storage="csv"`` writes one ``values/t<index>.csv`` matrix per
    timestep; ``storage="binary"`` writes ``values.bin``, little-endian
    float64 in (t, n, m) C order. ``manifest.json`` records which.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "usage_cube",
        "format_version": FORMAT_VERSION,
        "T": cube.T,
        "N": cube.N,
        "M": cube.M,
        "node_ids": list(cube.node_ids),
        "metric_ids": list(cube.metric_ids),
        "timestamps": cube.timestamps.tolist(),
        "normalization": None,
        "storage": storage,
        "mask": None,
    }
    if cube.normalization is not None:
        means, stds = cube.normalization
        manifest["normalization"] = {"mean": means.tolist(), "std": stds.tolist()}

    if storage == "csv":
        (path / "values").mkdir(exist_ok=True)
        for t in range(cube.T):
            _write_matrix(path / "values" / f"t{t}.csv", cube.values[t])
        if cube.mask is not None:
            (path / "mask").mkdir(exist_ok=True)
            for t in range(cube.T):
                _write_matrix(path / "mask" / f"t{t}.csv", cube.mask[t].astype(np.int8), fmt=str)
            manifest["mask"] = "mask/t<index>.csv"
        manifest["values"] = "values/t<index>.csv"
    elif storage == "binary":
        cube.values.astype("<f8").tofile(path / "values.bin")
        if cube.mask is not None:
            cube.mask.astype(np.uint8).tofile(path / "mask.bin")
            manifest["mask"] = "mask.bin"
        manifest["values"] = "values.bin"
    else:
        raise ValueError(f"storage must be 'csv' or 'binary', got {storage!r}")

    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_cube(path) -> UsageCube:
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "usage_cube":
        raise IngestError(f"{path} does not contain a usage cube")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IngestError(f"unsupported cube format version {manifest.get('format_version')!r}")
    shape = (manifest["T"], manifest["N"], manifest["M"])
    mask = None
    if manifest["storage"] == "csv":
        values = np.stack([_read_matrix(path / "values" / f"t{t}.csv") for t in range(shape[0])])
        if manifest["mask"]:
            mask = np.stack(
                [_read_matrix(path / "mask" / f"t{t}.csv", dtype=np.int8) for t in range(shape[0])]
            ).astype(bool)
    elif manifest["storage"] == "binary":
        values = np.fromfile(path / "values.bin", dtype="<f8").reshape(shape)
        if manifest["mask"]:
            mask = np.fromfile(path / "mask.bin", dtype=np.uint8).reshape(shape).astype(bool)
    else:
        raise IngestError(f"unknown storage {manifest['storage']!r}")
    values = values.reshape(shape)
    norm = manifest.get("normalization")
    normalization = None if norm is None else (norm["mean"], norm["std"])
    return UsageCube(
        manifest["node_ids"], manifest["metric_ids"], manifest["timestamps"], values, mask, normalization
    )
