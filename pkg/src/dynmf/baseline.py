"""CP (PARAFAC) decomposition of the usage cube, fitted by alternating least squares.

Serves as the tensor-reconstruction baseline detector: its per-node
reconstruction error is scored the same way as the factor model's.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .anomaly import AnomalyScoreSeries, scores_from_residuals
from .cube import UsageCube

log = logging.getLogger(__name__)

RIDGE = 1e-10


@dataclass(eq=False)
class CPModel:
    weights: np.ndarray  # (R,)
    A: np.ndarray  # nodes, (N, R)
    B: np.ndarray  # metrics, (M, R)
    C: np.ndarray  # time, (T, R)
    errors: list = field(default_factory=list)  # Frobenius error after each sweep
    fallbacks: int = 0  # sub-problems solved by least-norm lstsq

    @property
    def rank(self) -> int:
        return self.weights.shape[0]

    def reconstruct(self) -> np.ndarray:
        """``(T, N, M)`` tensor ``sum_r w_r a_r (x) b_r (x) c_r``."""
        return np.einsum("tr,nr,mr->tnm", self.C * self.weights, self.A, self.B, optimize=True)

    def equals(self, other: "CPModel") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("weights", "A", "B", "C")
        ) and self.errors == other.errors


def _solve(gram: np.ndarray, rhs: np.ndarray) -> tuple:
    """Solve ``X @ gram = rhs`` for X; returns (X, used_fallback)."""
    R = gram.shape[0]
    jitter = RIDGE * max(float(np.trace(gram)) / R, 1.0)
    try:
        L = np.linalg.cholesky(gram + jitter * np.eye(R))
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(gram, rhs.T, rcond=None)
        return sol.T, True
    y = np.linalg.solve(L, rhs.T)
    return np.linalg.solve(L.T, y).T, False


def _normalize_columns(F: np.ndarray) -> tuple:
    norms = np.linalg.norm(F, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return F / safe, norms


def cp_als_fit(cube: UsageCube, rank: int = 10, iters: int = 200, seed: int = 42) -> CPModel:
    """Fit a rank-``rank`` CP model with ``iters`` ALS sweeps.

    Each sweep updates the node, metric and time factors in turn by
    solving their normal equations (with a tiny ridge for conditioning),
    then rescales every factor column to unit norm and absorbs the norms
    into ``weights``. A singular system falls back to least-norm
    ``lstsq`` and increments ``fallbacks``.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if cube.mask is not None:
        raise ValueError("CP-ALS baseline requires a complete cube (no masked cells)")

    X = cube.values  # (T, N, M)
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((cube.N, rank))
    B = rng.standard_normal((cube.M, rank))
    C = rng.standard_normal((cube.T, rank))

    errors = []
    fallbacks = 0
    weights = np.ones(rank)
    for _ in range(iters):
        # node factors: X_(n) (C kr B)
        rhs = np.einsum("tnm,mr,tr->nr", X, B, C, optimize=True)
        A, fb = _solve((B.T @ B) * (C.T @ C), rhs)
        fallbacks += fb
        rhs = np.einsum("tnm,nr,tr->mr", X, A, C, optimize=True)
        B, fb = _solve((A.T @ A) * (C.T @ C), rhs)
        fallbacks += fb
        rhs = np.einsum("tnm,nr,mr->tr", X, A, B, optimize=True)
        C, fb = _solve((A.T @ A) * (B.T @ B), rhs)
        fallbacks += fb

        A, na = _normalize_columns(A)
        B, nb = _normalize_columns(B)
        C, nc = _normalize_columns(C)
        weights = na * nb * nc
        approx = np.einsum("tr,nr,mr->tnm", C * weights, A, B, optimize=True)
        errors.append(float(np.linalg.norm(X - approx)))
        C_unit = C
        # next sweep starts from C carrying the weights
        C = C * weights

    if fallbacks:
        log.warning("CP-ALS used least-norm fallback on %d singular sub-problems", fallbacks)
    return CPModel(weights, A, B, C_unit, errors, fallbacks)


def reconstruction_error(model: CPModel, cube: UsageCube) -> float:
    return float(np.linalg.norm(cube.values - model.reconstruct()))


def cp_node_scores(model: CPModel, cube: UsageCube) -> AnomalyScoreSeries:
    """Mean absolute CP reconstruction residual over metrics, per node and time."""
    if (model.A.shape[0], model.B.shape[0], model.C.shape[0]) != (cube.N, cube.M, cube.T):
        raise ValueError(
            f"CP model is (N={model.A.shape[0]}, M={model.B.shape[0]}, T={model.C.shape[0]}) "
            f"but cube is (N={cube.N}, M={cube.M}, T={cube.T})"
        )
    res = cube.values - model.reconstruct()
    return scores_from_residuals(res, cube.observed, cube.node_ids, cube.timestamps)
