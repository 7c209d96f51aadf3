"""TR-ALS: fixed-rank tensor-ring completion by alternating least squares."""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from src.config import ALSConfig
from src.errors import EmptyObservationError, SingularSystemError
from src.tensor import (
    IndexSet,
    TRCores,
    broadcast_ranks,
    cyclic_order,
    design_rows,
    random_cores,
    tr_entries,
)

logger = logging.getLogger(__name__)


def _solve_normal(gram: np.ndarray, rhs: np.ndarray, ridge: np.ndarray, n: int, i: int) -> np.ndarray:
    system = gram + np.diag(ridge)
    if not ridge.any():
        rank = np.linalg.matrix_rank(system)
        if rank < system.shape[0]:
            raise SingularSystemError(
                f"Normal equations for mode {n}, slice {i} are singular (rank {rank} < {system.shape[0]})",
                diagnostics={"mode": n, "slice": i, "rank": int(rank)},
            )
    try:
        return linalg.solve(system, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"Normal equations for mode {n}, slice {i}: {e}") from e


def _solve_slice(cores: TRCores, values: np.ndarray, mask: IndexSet, n: int, i: int, ridge: np.ndarray):
    pos = mask.bucket(n, i)
    comp = mask.multi[pos][:, cyclic_order(cores.order, n)]
    rows = design_rows(cores, comp, n)
    return i, _solve_normal(rows.T @ rows, rows.T @ values[pos], ridge, n, i)


def tr_als_step_oracle(
    cores: TRCores,
    t: np.ndarray,
    mask: IndexSet,
    n: int,
    ridge: Union[float, np.ndarray],
    n_jobs: int = 1,
) -> np.ndarray:
    """Least-squares update of core ``n`` with every other core fixed.

    Each slice solves ``(A^T A + diag(ridge)) g = A^T t_obs`` where ``A`` holds
    the observed subchain rows. ``ridge`` is a scalar or a vector over the
    slice entries. Returns the new core; ``cores`` is left untouched.
    """
    core = cores.cores[n]
    size = core.shape[0] * core.shape[2]
    ridge_vec = np.broadcast_to(np.asarray(ridge, dtype=np.float64), (size,))
    values = mask.values(np.asarray(t, dtype=np.float64))
    if n_jobs == 1:
        results = [_solve_slice(cores, values, mask, n, i, ridge_vec) for i in range(core.shape[1])]
    else:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_solve_slice)(cores, values, mask, n, i, ridge_vec) for i in range(core.shape[1])
        )
    new_core = np.empty_like(core)
    for i, g in results:
        new_core[:, i, :] = g.reshape(core.shape[0], core.shape[2], order="F")
    return new_core


def regularized_objective(cores: TRCores, values: np.ndarray, mask: IndexSet, ridge: float) -> float:
    """Observed squared error plus ``ridge`` times the squared norm of the cores."""
    residual = values - tr_entries(cores, mask.multi)
    return float(residual @ residual + ridge * sum(np.sum(c ** 2) for c in cores.cores))


def _warn_underdetermined(mask: IndexSet, cores: TRCores, n: int) -> None:
    size = cores.cores[n].shape[0] * cores.cores[n].shape[2]
    thin = sum(1 for i in range(mask.shape[n]) if mask.bucket(n, i).size < size)
    if thin:
        logger.warning(
            "Mode %d: %d of %d slices have fewer observations than %d unknowns; "
            "relying on ridge regularization", n, thin, mask.shape[n], size,
        )


def tr_als_fit(
    t: np.ndarray,
    mask: IndexSet,
    ranks: Union[int, Sequence[int]],
    config: Optional[ALSConfig] = None,
    trace: Optional[List[float]] = None,
) -> TRCores:
    """Fit TR cores with the given bond ranks to the observed entries of ``t``.

    Sweeps modes in ascending order until the relative change of the
    observed RMSE falls below ``config.tol`` or ``config.max_iters`` sweeps
    have run. When ``trace`` is given, the observed RMSE after each sweep is
    appended to it.
    """
    config = config or ALSConfig(ranks=ranks)
    if len(mask) == 0:
        raise EmptyObservationError("Cannot fit TR-ALS with zero observed entries")
    t = np.asarray(t, dtype=np.float64)
    bonds = broadcast_ranks(ranks, len(mask.shape))
    cores = random_cores(mask.shape, bonds, np.random.default_rng(config.seed))
    values = mask.values(t)
    for n in range(cores.order):
        _warn_underdetermined(mask, cores, n)

    floor = 1e-13 * max(float(np.sqrt(np.mean(values ** 2))), np.finfo(float).tiny)
    prev_rmse = np.inf
    for it in range(1, config.max_iters + 1):
        for n in range(cores.order):
            cores.cores[n] = tr_als_step_oracle(cores, t, mask, n, config.ridge, n_jobs=config.n_jobs)
        residual = values - tr_entries(cores, mask.multi)
        rmse = float(np.sqrt(np.mean(residual ** 2)))
        if trace is not None:
            trace.append(rmse)
        logger.debug("TR-ALS sweep %d: observed RMSE %.3e", it, rmse)
        if not np.isfinite(rmse):
            raise SingularSystemError(f"TR-ALS diverged at sweep {it}")
        stalled = np.isfinite(prev_rmse) and abs(prev_rmse - rmse) <= config.tol * prev_rmse
        if stalled or rmse <= floor:
            logger.info("TR-ALS converged after %d sweeps (RMSE %.3e)", it, rmse)
            break
        prev_rmse = rmse
    return cores
