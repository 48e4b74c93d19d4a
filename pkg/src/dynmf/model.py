"""The dynamic factorization model ``Z_t = (U_bar * U_hat[t]) @ V.T``.

``U_bar`` (N x K) holds static node factors, ``V`` (M x K) metric factors
and ``U_hat`` (T x N x K) dynamic node factors. ``*`` is element-wise.
Fitted factors are only identifiable up to coordinate-wise rescaling
between ``U_bar`` and ``U_hat`` (and between the node block and ``V``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cube import FORMAT_VERSION, UsageCube, _read_matrix, _write_matrix


class DimensionError(ValueError):
    """Model and data dimensions disagree."""


@dataclass(eq=False)
class LatentModel:
    U_bar: np.ndarray
    V: np.ndarray
    U_hat: np.ndarray
    node_ids: Optional[tuple] = None
    metric_ids: Optional[tuple] = None
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.U_bar = np.asarray(self.U_bar, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.U_hat = np.asarray(self.U_hat, dtype=np.float64)
        if self.U_bar.ndim != 2 or self.V.ndim != 2 or self.U_hat.ndim != 3:
            raise DimensionError("expected U_bar (N, K), V (M, K), U_hat (T, N, K)")
        N, K = self.U_bar.shape
        if K < 1:
            raise DimensionError("latent dimension K must be >= 1")
        if self.V.shape[1] != K or self.U_hat.shape[1:] != (N, K):
            raise DimensionError(
                f"inconsistent factor shapes U_bar {self.U_bar.shape}, V {self.V.shape}, "
                f"U_hat {self.U_hat.shape}"
            )
        for name in ("U_bar", "V", "U_hat"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.node_ids is None:
            self.node_ids = tuple(str(i) for i in range(N))
        if self.metric_ids is None:
            self.metric_ids = tuple(str(i) for i in range(self.M))
        if self.timestamps is None:
            self.timestamps = np.arange(self.T, dtype=np.int64)
        self.node_ids = tuple(self.node_ids)
        self.metric_ids = tuple(self.metric_ids)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if (len(self.node_ids), len(self.metric_ids), len(self.timestamps)) != (N, self.M, self.T):
            raise DimensionError("labels do not match factor dimensions")

    @property
    def N(self) -> int:
        return self.U_bar.shape[0]

    @property
    def M(self) -> int:
        return self.V.shape[0]

    @property
    def T(self) -> int:
        return self.U_hat.shape[0]

    @property
    def K(self) -> int:
        return self.U_bar.shape[1]

    def reconstruct(self) -> np.ndarray:
        """Full ``(T, N, M)`` reconstruction."""
        return (self.U_bar * self.U_hat) @ self.V.T

    def equals(self, other: "LatentModel") -> bool:
        """Bit-exact comparison of factors and labels."""
        return (
            np.array_equal(self.U_bar, other.U_bar)
            and np.array_equal(self.V, other.V)
            and np.array_equal(self.U_hat, other.U_hat)
            and self.node_ids == other.node_ids
            and self.metric_ids == other.metric_ids
            and np.array_equal(self.timestamps, other.timestamps)
        )


def _check_index(i, size, name):
    if not (0 <= i < size):
        raise IndexError(f"{name} index {i} out of range [0, {size})")


def reconstruct_cell(model: LatentModel, n: int, m: int, t: int) -> float:
    _check_index(n, model.N, "node")
    _check_index(m, model.M, "metric")
    _check_index(t, model.T, "time")
    return float(np.sum(model.U_bar[n] * model.U_hat[t, n] * model.V[m]))


def reconstruct_slice(model: LatentModel, t: int) -> np.ndarray:
    _check_index(t, model.T, "time")
    return (model.U_bar * model.U_hat[t]) @ model.V.T


def check_dimensions(model: LatentModel, cube: UsageCube) -> None:
    if (model.T, model.N, model.M) != cube.shape:
        raise DimensionError(
            f"model is (T={model.T}, N={model.N}, M={model.M}) but cube is "
            f"(T={cube.T}, N={cube.N}, M={cube.M})"
        )


def residuals(model: LatentModel, cube: UsageCube) -> np.ndarray:
    """``Z - Z_hat`` with masked cells set to 0."""
    check_dimensions(model, cube)
    res = cube.values - model.reconstruct()
    if cube.mask is not None:
        res = np.where(cube.mask, res, 0.0)
    return res


# -- loss and gradients ------------------------------------------------------

def _chunk_terms(U_bar, V, U_hat, values, mask):
    """Partial loss and gradient terms over one block of timesteps."""
    P = U_bar * U_hat
    R = values - P @ V.T
    if mask is not None:
        R = np.where(mask, R, 0.0)
    RV = R @ V
    loss = float(np.sum(R * R))
    g_hat = -2.0 * RV * U_bar
    g_bar = -2.0 * np.sum(RV * U_hat, axis=0)
    # sum_t R_t^T P_t as one (M, tN) @ (tN, K) product
    g_V = -2.0 * (R.reshape(-1, R.shape[-1]).T @ P.reshape(-1, P.shape[-1]))
    return loss, g_bar, g_V, g_hat


def tree_sum(parts: Sequence):
    """Pairwise sum in a fixed order, independent of how parts were computed."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to sum")
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def loss_and_grads(
    U_bar,
    V,
    U_hat,
    values,
    mask=None,
    *,
    times=None,
    l2: float = 0.0,
    chunk_size: Optional[int] = None,
    executor=None,
    scale: float = 1.0,
    out=None,
):
    """Objective and gradients on raw arrays.

    ``times`` restricts the data term to a subset of timesteps (the
    dynamic-factor gradient of other slices is zero). ``scale``
    multiplies the data term and its gradients. Timesteps are split into
    blocks of ``chunk_size``; per-block sums are combined with
    :func:`tree_sum`, so the result depends on the block layout but not
    on ``executor``. ``out`` may be a tuple ``(g_bar, g_V, g_hat)`` of
    preallocated arrays to write into.
    """
    T = U_hat.shape[0]
    idx = np.arange(T) if times is None else np.asarray(times)
    size = len(idx) if not chunk_size else chunk_size
    blocks = [idx[i:i + size] for i in range(0, len(idx), size)]
    full = times is None and len(blocks) == 1

    def run(block):
        if full:
            return _chunk_terms(U_bar, V, U_hat, values, mask)
        sl = slice(block[0], block[-1] + 1) if times is None else block
        return _chunk_terms(U_bar, V, U_hat[sl], values[sl], None if mask is None else mask[sl])

    if executor is not None and len(blocks) > 1:
        results = list(executor.map(run, blocks))
    else:
        results = [run(b) for b in blocks]

    if out is None:
        g_bar, g_V, g_hat = np.empty_like(U_bar), np.empty_like(V), np.zeros_like(U_hat)
    else:
        g_bar, g_V, g_hat = out
        g_hat.fill(0.0)

    loss = tree_sum([r[0] for r in results])
    g_bar[...] = tree_sum([r[1] for r in results])
    g_V[...] = tree_sum([r[2] for r in results])
    if full:
        g_hat[...] = results[0][3]
    elif times is None:
        for block, r in zip(blocks, results):
            g_hat[block[0]:block[-1] + 1] = r[3]
    else:
        for block, r in zip(blocks, results):
            g_hat[block] = r[3]

    if scale != 1.0:
        loss *= scale
        g_bar *= scale
        g_V *= scale
        g_hat *= scale
    if l2:
        loss += l2 * float(np.sum(U_bar * U_bar) + np.sum(V * V) + np.sum(U_hat * U_hat))
        g_bar += 2.0 * l2 * U_bar
        g_V += 2.0 * l2 * V
        g_hat += 2.0 * l2 * U_hat
    return loss, (g_bar, g_V, g_hat)


def objective(model: LatentModel, cube: UsageCube, l2: float = 0.0) -> float:
    """Sum of squared residuals over observed cells, plus optional L2 penalty."""
    check_dimensions(model, cube)
    loss, _ = loss_and_grads(model.U_bar, model.V, model.U_hat, cube.values, cube.mask, l2=l2)
    return loss


def gradients(model: LatentModel, cube: UsageCube, l2: float = 0.0):
    """Analytic gradients ``(dL/dU_bar, dL/dV, dL/dU_hat)`` of :func:`objective`."""
    check_dimensions(model, cube)
    _, grads = loss_and_grads(model.U_bar, model.V, model.U_hat, cube.values, cube.mask, l2=l2)
    return grads


# -- persistence -------------------------------------------------------------

def save_model(model: LatentModel, path) -> None:
    path = Path(path)
    (path / "U_hat").mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "latent_model",
        "format_version": FORMAT_VERSION,
        "N": model.N,
        "M": model.M,
        "T": model.T,
        "K": model.K,
        "node_ids": list(model.node_ids),
        "metric_ids": list(model.metric_ids),
        "timestamps": model.timestamps.tolist(),
        "files": {"U_bar": "U_bar.csv", "V": "V.csv", "U_hat": "U_hat/t<index>.csv"},
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    _write_matrix(path / "U_bar.csv", model.U_bar)
    _write_matrix(path / "V.csv", model.V)
    for t in range(model.T):
        _write_matrix(path / "U_hat" / f"t{t}.csv", model.U_hat[t])


def load_model(path) -> LatentModel:
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "latent_model":
        raise ValueError(f"{path} does not contain a latent model")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {manifest.get('format_version')!r}")
    N, M, T, K = (manifest[k] for k in ("N", "M", "T", "K"))
    U_bar = _read_matrix(path / "U_bar.csv").reshape(N, K)
    V = _read_matrix(path / "V.csv").reshape(M, K)
    U_hat = np.stack([_read_matrix(path / "U_hat" / f"t{t}.csv").reshape(N, K) for t in range(T)])
    return LatentModel(U_bar, V, U_hat, manifest["node_ids"], manifest["metric_ids"], manifest["timestamps"])
