"""2-D projections of latent factors and correlations between latent dimensions."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import LatentModel

log = logging.getLogger(__name__)


@dataclass
class Projection2D:
    labels: tuple
    coords: np.ndarray  # (P, 2)
    explained_variance: np.ndarray  # fractions of total variance, (2,)
    loadings: np.ndarray  # (K, 2)


@dataclass
class CorrelationMatrix:
    matrix: np.ndarray
    zero_variance: list = field(default_factory=list)


def _orient(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    vectors = vectors.copy()
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        i = int(np.argmax(np.abs(col)))  # first index wins ties
        if col[i] < 0:
            vectors[:, j] = -col
    return vectors


def pca_2d(rows, labels=None) -> Projection2D:
    """Project rows onto the two leading principal axes.

    Columns are centered and the covariance uses ``1/(P-1)``. Each axis
    is oriented so that its largest-magnitude loading is positive.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ValueError(f"need a P x K matrix with P >= 2 and K >= 2, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("rows contain non-finite entries")
    labels = tuple(range(X.shape[0])) if labels is None else tuple(labels)
    if len(labels) != X.shape[0]:
        raise ValueError("one label per row required")

    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0:
        raise ValueError("rows are all identical; nothing to project")
    loadings = _orient(evecs[:, :2])
    return Projection2D(labels, Xc @ loadings, evals[:2] / total, loadings)


def latent_correlations(model: LatentModel) -> CorrelationMatrix:
    """Pearson correlation between latent dimensions of the dynamic node factors.

    Every (node, time) pair is one sample. A dimension with zero variance
    gets 0 off the diagonal and is listed in ``zero_variance``.
    """
    X = model.U_hat.reshape(-1, model.K)
    if X.shape[0] < 2:
        raise ValueError("need at least two (node, time) samples")
    Xc = X - X.mean(axis=0)
    std = np.sqrt((Xc * Xc).sum(axis=0))
    zero = std == 0
    safe = np.where(zero, 1.0, std)
    corr = (Xc.T @ Xc) / np.outer(safe, safe)
    corr[zero, :] = 0.0
    corr[:, zero] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    zero_dims = [int(k) for k in np.flatnonzero(zero)]
    if zero_dims:
        log.warning("latent dimensions with zero variance: %s", zero_dims)
    return CorrelationMatrix(corr, zero_dims)


def write_projection(proj: Projection2D, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("label", "pc1", "pc2"))
        for label, (x, y) in zip(proj.labels, proj.coords.tolist()):
            writer.writerow((label, repr(x), repr(y)))


def write_correlations(corr: CorrelationMatrix, path) -> None:
    K = corr.matrix.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + list(range(K)))
        for k, row in enumerate(corr.matrix.tolist()):
            writer.writerow([k] + [repr(v) for v in row])
