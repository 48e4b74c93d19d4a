"""Fitting a :class:`LatentModel` to a usage cube with Adam."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .adam import AdamState, adam_step
from .cube import UsageCube
from .model import LatentModel, loss_and_grads, residuals

log = logging.getLogger(__name__)

# block size for per-timestep reductions in reproducible mode
REPRODUCIBLE_CHUNK = 64
EARLY_STOP_WINDOW = 100
EARLY_STOP_RTOL = 1e-8


class FitError(RuntimeError):
    """Training diverged."""


@dataclass(frozen=True)
class FitConfig:
    K: int = 10
    max_iter: int = 20000
    seed: int = 42
    init_std: float = 0.1
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 0.0
    minibatch_slices: Optional[int] = None
    trace_every: int = 100
    reproducible_reduction: bool = True
    threads: int = 1
    early_stop: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.init_std > 0:
            raise ValueError(f"init_std must be > 0, got {self.init_std}")
        if self.l2_lambda < 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.minibatch_slices is not None and self.minibatch_slices < 1:
            raise ValueError("minibatch_slices must be >= 1")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        # validates the optimizer hyperparameters
        AdamState(1, self.alpha, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    objective_trace: list
    final_objective: float
    final_avg_abs_error: float
    n_iter: int
    config: FitConfig
    wall_time: float = field(default=0.0, compare=False)

    def trace_array(self) -> np.ndarray:
        return np.array(self.objective_trace, dtype=np.float64).reshape(-1, 2)


def init_model(cube: UsageCube, config: FitConfig) -> LatentModel:
    """Draw every factor entry i.i.d. from Normal(0, init_std**2)."""
    rng = np.random.default_rng(config.seed)
    K, s = config.K, config.init_std
    U_bar = rng.normal(0.0, s, size=(cube.N, K))
    V = rng.normal(0.0, s, size=(cube.M, K))
    U_hat = rng.normal(0.0, s, size=(cube.T, cube.N, K))
    return LatentModel(U_bar, V, U_hat, cube.node_ids, cube.metric_ids, cube.timestamps)


def avg_abs_error(model: LatentModel, cube: UsageCube) -> float:
    res = residuals(model, cube)
    return float(np.abs(res).sum() / cube.observed.sum())


def fit(cube: UsageCube, config: FitConfig, model: Optional[LatentModel] = None):
    """Run ``config.max_iter`` Adam steps on all factors jointly.

    Returns ``(model, report)``. The trace holds the objective at
    iteration 0, every ``trace_every`` iterations, and after the last
    step. ``model`` may supply starting factors; it is not modified.
    """
    if not cube.is_normalized:
        log.warning("fitting a cube that has not been normalized")
    if model is None:
        model = init_model(cube, config)
    elif (model.T, model.N, model.M, model.K) != (cube.T, cube.N, cube.M, config.K):
        raise ValueError("starting model does not match cube dimensions and config.K")
    start = time.perf_counter()

    N, M, T, K = cube.N, cube.M, cube.T, config.K
    sizes = (N * K, M * K, T * N * K)
    params = np.concatenate([model.U_bar.ravel(), model.V.ravel(), model.U_hat.ravel()])
    grad = np.empty_like(params)
    o1, o2 = sizes[0], sizes[0] + sizes[1]
    U_bar = params[:o1].reshape(N, K)
    V = params[o1:o2].reshape(M, K)
    U_hat = params[o2:].reshape(T, N, K)
    grad_views = (grad[:o1].reshape(N, K), grad[o1:o2].reshape(M, K), grad[o2:].reshape(T, N, K))

    if config.reproducible_reduction:
        chunk = REPRODUCIBLE_CHUNK if T > REPRODUCIBLE_CHUNK else None
    elif config.threads > 1:
        chunk = math.ceil(T / config.threads)
    else:
        chunk = None

    batch = config.minibatch_slices
    if batch is not None and batch >= T:
        batch = None
    batch_rng = np.random.default_rng([config.seed, 1])

    state = AdamState(params.size, config.alpha, config.beta1, config.beta2, config.eps)
    values, mask, l2 = cube.values, cube.mask, config.l2_lambda
    trace = []
    history = []

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else nullcontext()
    with pool as executor:
        def full_objective():
            loss, _ = loss_and_grads(U_bar, V, U_hat, values, mask, l2=l2, chunk_size=chunk, executor=executor)
            return loss

        n_iter = config.max_iter
        for it in range(config.max_iter):
            if batch is None:
                loss, _ = loss_and_grads(
                    U_bar, V, U_hat, values, mask, l2=l2,
                    chunk_size=chunk, executor=executor, out=grad_views,
                )
            else:
                times = np.sort(batch_rng.choice(T, size=batch, replace=False))
                _, _ = loss_and_grads(
                    U_bar, V, U_hat, values, mask, times=times, l2=l2, scale=T / batch,
                    chunk_size=chunk, executor=executor, out=grad_views,
                )
                loss = full_objective() if it % config.trace_every == 0 or config.early_stop else None

            if loss is not None and not math.isfinite(loss):
                raise FitError(f"non-finite objective at iteration {it}")
            if it % config.trace_every == 0:
                trace.append((it, loss))
            if config.early_stop:
                history.append(loss)
                if len(history) > EARLY_STOP_WINDOW:
                    prev = history[-1 - EARLY_STOP_WINDOW]
                    if prev > 0 and abs(loss - prev) / prev < EARLY_STOP_RTOL:
                        n_iter = it
                        break
            try:
                adam_step(state, params, grad, inplace=True)
            except ValueError as exc:
                raise FitError(f"iteration {it}: {exc}") from None

        final = full_objective()
        if not math.isfinite(final):
            raise FitError(f"non-finite objective at iteration {n_iter}")
        if trace and trace[-1][0] == n_iter:
            trace[-1] = (n_iter, final)
        else:
            trace.append((n_iter, final))

    fitted = LatentModel(
        U_bar.copy(), V.copy(), U_hat.copy(), cube.node_ids, cube.metric_ids, cube.timestamps
    )
    report = FitReport(
        objective_trace=trace,
        final_objective=final,
        final_avg_abs_error=avg_abs_error(fitted, cube),
        n_iter=n_iter,
        config=config,
        wall_time=time.perf_counter() - start,
    )
    log.info("fit K=%d: objective %.6g after %d iterations (%.1fs)", K, final, n_iter, report.wall_time)
    return fitted, report


def k_sweep(cube: UsageCube, ks: Sequence[int], config: FitConfig) -> list:
    """Fit once per latent dimension in ``ks`` with otherwise identical config."""
    if not ks:
        raise ValueError("ks must be non-empty")
    reports = []
    for k in ks:
        _, report = fit(cube, replace(config, K=int(k)))
        reports.append(report)
    return reports
