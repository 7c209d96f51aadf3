"""TR-VBI: closed-form variational updates with automatic rank pruning.

The loop follows the usual coordinate-ascent order: every core posterior in
ascending mode order, then every lambda posterior (each followed by
pruning of its bond), then the noise precision.

Second moments of slice products are carried in "Kronecker form"
(see :func:`src.tensor.kron_moment`): for independent random matrices,
E[(AB) ⊗ (AB)] = E[A ⊗ A] E[B ⊗ B], so the moment of any subchain is a
plain matrix product of per-slice tables.
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from src.config import (
    JITTER_GROWTH,
    JITTER_RETRIES,
    JITTER_SCALE,
    LAMBDA_RATE_FACTOR,
    MOMENT_BATCH,
    PRUNE_THRESHOLD,
    ROUND_TOL,
    FitConfig,
)
from src.errors import NumericalError, ShapeError
from src.models import (
    Hyperpriors,
    ModelState,
    expected_reconstruction,
    init_state,
    prior_precision,
    slice_moments,
    slice_second_moments,
)
from src.tensor import IndexSet, cyclic_order, design_rows, kron_moment, tr_entries

logger = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    """One row of the fit diagnostics trace."""
    iter: int
    e_tau: float
    ranks: List[int]
    obs_rmse: float

    def to_dict(self) -> Dict:
        return asdict(self)


# ── linear algebra ───────────────────────────────────────────────────────


def spd_inverse(a: np.ndarray, context: Optional[Dict] = None) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky.

    On failure a diagonal jitter of ``JITTER_SCALE * trace / size`` is added
    and grown by ``JITTER_GROWTH`` up to ``JITTER_RETRIES`` times.
    """
    a = 0.5 * (a + a.T)
    size = a.shape[0]
    jitter = JITTER_SCALE * max(float(np.trace(a)) / size, np.finfo(float).tiny)
    eye = np.eye(size)
    for attempt in range(JITTER_RETRIES + 1):
        target = a if attempt == 0 else a + jitter * eye
        try:
            factor = linalg.cho_factor(target, lower=True, check_finite=True)
            inv = linalg.cho_solve(factor, eye)
            return 0.5 * (inv + inv.T)
        except (linalg.LinAlgError, ValueError):
            if attempt:
                jitter *= JITTER_GROWTH
            logger.debug("Cholesky failed (attempt %d), jitter=%.3e", attempt + 1, jitter)
    raise NumericalError("Posterior precision is not positive definite", diagnostics=context)


# ── moment chains ────────────────────────────────────────────────────────


def kron_tables(state: ModelState, skip: Optional[int] = None) -> List[Optional[np.ndarray]]:
    """Per-mode ``(I_k, R_{k-1}^2, R_k^2)`` tables of E[G_k(i) ⊗ G_k(i)]."""
    tables: List[Optional[np.ndarray]] = []
    for k, core in enumerate(state.cores.mean.cores):
        if k == skip:
            tables.append(None)
            continue
        tables.append(kron_moment(slice_moments(state, k), core.shape[0], core.shape[2]))
    return tables


def _chain_sum(tables: Sequence[np.ndarray], modes: Sequence[int], comp: np.ndarray) -> np.ndarray:
    """Sum over rows of ``comp`` of the product of ``tables[modes[j]][comp[:, j]]``."""
    first = tables[modes[0]]
    last = tables[modes[-1]]
    total = np.zeros((first.shape[1], last.shape[2]))
    for start in range(0, comp.shape[0], MOMENT_BATCH):
        idx = comp[start:start + MOMENT_BATCH]
        prod = first[idx[:, 0]]
        for j, k in enumerate(modes[1:], 1):
            prod = np.matmul(prod, tables[k][idx[:, j]])
        total += prod.sum(axis=0)
    return total


def _row_moment(kf: np.ndarray, r_n: int, r_prev: int) -> np.ndarray:
    """E[a a^T] with ``a = vec(S^T)`` from the Kronecker form of ``S`` (R_n by R_{n-1})."""
    t = kf.reshape(r_n, r_n, r_prev, r_prev)
    return t.transpose(0, 2, 1, 3).reshape(r_n * r_prev, r_n * r_prev)


def _slice_gram(tables, state: ModelState, n: int, comp: np.ndarray) -> np.ndarray:
    core = state.cores.mean.cores[n]
    r_prev, _, r_n = core.shape
    if comp.shape[0] == 0:
        return np.zeros((r_prev * r_n, r_prev * r_n))
    kf = _chain_sum(tables, cyclic_order(state.order, n), comp)
    return _row_moment(kf, r_n, r_prev)


def expected_subchain_gram(state: ModelState, n: int, i_n: int) -> np.ndarray:
    """E[A^T A] where A stacks the observed rows of the mode-``n`` subchain unfolding at slice ``i_n``."""
    tables = kron_tables(state, skip=n)
    pos = state.mask.bucket(n, i_n)
    comp = state.mask.multi[pos][:, cyclic_order(state.order, n)]
    return _slice_gram(tables, state, n, comp)


def entry_second_moments(state: ModelState, multi: np.ndarray, tables=None) -> np.ndarray:
    """E[x_hat^2] at each multi-index row, via the full moment chain and a trace."""
    if tables is None:
        tables = kron_tables(state)
    multi = np.asarray(multi, dtype=np.int64).reshape(-1, state.order)
    out = np.empty(multi.shape[0])
    for start in range(0, multi.shape[0], MOMENT_BATCH):
        idx = multi[start:start + MOMENT_BATCH]
        prod = tables[0][idx[:, 0]]
        for k in range(1, state.order):
            prod = np.matmul(prod, tables[k][idx[:, k]])
        out[start:start + MOMENT_BATCH] = np.einsum("bii->b", prod)
    return out


def predictive_variance(state: ModelState, index: Optional[IndexSet] = None) -> np.ndarray:
    """Var[x_hat] = E[x_hat^2] - E[x_hat]^2 under q(G).

    Returns a full tensor when ``index`` is None, else one value per entry of
    ``index.linear``.
    """
    target = index if index is not None else IndexSet.full(state.dims)
    second = entry_second_moments(state, target.multi)
    first = tr_entries(state.cores.mean, target.multi)
    var = np.maximum(second - first ** 2, 0.0)
    if index is not None:
        return var
    return var.reshape(state.dims, order="F")


# ── posterior updates ────────────────────────────────────────────────────


def _solve_slice(state: ModelState, tables, n: int, i: int, tau: float, prior: np.ndarray):
    pos = state.mask.bucket(n, i)
    comp = state.mask.multi[pos][:, cyclic_order(state.order, n)]
    gram = _slice_gram(tables, state, n, comp)
    precision = tau * gram + np.diag(prior)
    context = {"mode": n, "slice": i, "e_tau": tau, "ranks": list(state.bonds), "iter": state.iteration}
    v = spd_inverse(precision, context)
    if comp.shape[0]:
        rows = design_rows(state.cores.mean, comp, n)
        g = tau * (v @ (rows.T @ state.observed_values[pos]))
    else:
        g = np.zeros(prior.size)
    return i, g, v


def update_core_factor(state: ModelState, n: int, n_jobs: int = 1) -> ModelState:
    """Update q(G_n) slice by slice; mutates and returns ``state``.

    V = (E[tau] E[A^T A] + E[Lambda])^-1 and mean = E[tau] V E[A]^T t_obs,
    where A is the observed subchain unfolding. Slices with no observations
    fall back to the prior (zero mean, inverse prior precision).
    """
    tau = state.tau.expectation
    prior = prior_precision(state, n)
    tables = kron_tables(state, skip=n)
    extent = state.dims[n]
    if n_jobs == 1:
        results = [_solve_slice(state, tables, n, i, tau, prior) for i in range(extent)]
    else:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_solve_slice)(state, tables, n, i, tau, prior) for i in range(extent)
        )
    for i, g, v in results:
        state.cores.set_slice(n, i, g, v)
    return state


def update_lambda(state: ModelState, n: int, rate_factor: float = LAMBDA_RATE_FACTOR) -> ModelState:
    """Update q(lambda_n) for the bond between core n and core n+1.

    The shape gains 1/2 for every prior element component r scales; the rate
    gains ``rate_factor`` times the lambda-weighted expected energies of
    G_n(:, :, r) and G_{n+1}(r, :, :).
    """
    order = state.order
    prev, nxt = (n - 1) % order, (n + 1) % order
    core_n = state.cores.mean.cores[n]
    core_next = state.cores.mean.cores[nxt]
    lam_prev = state.lambdas.expectation(prev)
    lam_next = state.lambdas.expectation(nxt)

    # G_n(:, :, r) weighted by lambda_{n-1}; G_{n+1}(r, :, :) weighted by lambda_{n+1}
    energy_n = np.einsum("ipr,p->r", slice_second_moments(state, n), lam_prev)
    energy_next = np.einsum("irq,q->r", slice_second_moments(state, nxt), lam_next)

    count = core_n.shape[1] * core_n.shape[0] + core_next.shape[1] * core_next.shape[2]
    state.lambdas.shape[n] = state.priors.c[n] + 0.5 * count
    state.lambdas.rate[n] = state.priors.d[n] + rate_factor * (energy_n + energy_next)
    return state


def update_tau(state: ModelState) -> ModelState:
    """Update q(tau) from the expected squared residual over observed entries."""
    multi = state.mask.multi
    t = state.observed_values
    x_hat = tr_entries(state.cores.mean, multi)
    second = entry_second_moments(state, multi)
    expected = float(np.sum(t ** 2) - 2.0 * np.dot(t, x_hat) + np.sum(second))
    state.tau.shape = state.priors.a + 0.5 * len(state.mask)
    state.tau.rate = state.priors.b + 0.5 * max(expected, 0.0)
    return state


# ── rank pruning ─────────────────────────────────────────────────────────


def component_power(state: ModelState, n: int) -> np.ndarray:
    """Per-component expected energy of bond n, normalized by element count."""
    nxt = (n + 1) % state.order
    energy_n = slice_second_moments(state, n).sum(axis=(0, 1))
    energy_next = slice_second_moments(state, nxt).sum(axis=(0, 2))
    core_n = state.cores.mean.cores[n]
    core_next = state.cores.mean.cores[nxt]
    count = core_n.shape[0] * core_n.shape[1] + core_next.shape[1] * core_next.shape[2]
    return (energy_n + energy_next) / count


def remove_components(state: ModelState, n: int, keep: np.ndarray) -> ModelState:
    """Drop bond-n components where ``keep`` is False from every structure that carries them."""
    keep = np.asarray(keep, dtype=bool)
    nxt = (n + 1) % state.order
    cores = state.cores.mean.cores
    r_prev = cores[n].shape[0]
    r_after = cores[nxt].shape[2]

    cores[n] = cores[n][:, :, keep]
    vec_keep = np.repeat(keep, r_prev)
    state.cores.cov[n] = state.cores.cov[n][:, vec_keep][:, :, vec_keep]

    cores[nxt] = cores[nxt][keep, :, :]
    vec_keep = np.tile(keep, r_after)
    state.cores.cov[nxt] = state.cores.cov[nxt][:, vec_keep][:, :, vec_keep]

    state.lambdas.shape[n] = state.lambdas.shape[n][keep]
    state.lambdas.rate[n] = state.lambdas.rate[n][keep]
    state.priors.c[n] = state.priors.c[n][keep]
    state.priors.d[n] = state.priors.d[n][keep]
    state.cores.mean.validate()
    return state


def prune_ranks(
    state: ModelState,
    threshold: float = PRUNE_THRESHOLD,
    rule: str = "power",
    modes: Optional[Sequence[int]] = None,
) -> ModelState:
    """Remove collapsed rank components; never goes below R_n = 1.

    ``rule="power"`` drops components whose group power is below
    ``threshold`` times the largest at that bond; ``rule="lambda"`` drops
    components whose E[lambda] exceeds the smallest one by more than
    ``1 / threshold``.
    """
    for n in (range(state.order) if modes is None else modes):
        r = state.bonds[n]
        if r <= 1:
            continue
        if rule == "power":
            power = component_power(state, n)
            keep = power >= threshold * power.max()
            best = int(np.argmax(power))
        elif rule == "lambda":
            lam = state.lambdas.expectation(n)
            keep = lam <= lam.min() / threshold
            best = int(np.argmin(lam))
        else:
            raise ShapeError(f"Unknown prune rule {rule!r}")
        if not keep.any():
            keep[best] = True
        if keep.all():
            continue
        remove_components(state, n, keep)
        logger.info("Pruned bond %d: R %d -> %d (iter %d)", n, r, int(keep.sum()), state.iteration)
    return state


def _congruence(m: np.ndarray, cov: np.ndarray) -> np.ndarray:
    out = np.einsum("ab,ibc,dc->iad", m, cov, m)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def round_bond(
    state: ModelState,
    n: int,
    tol: float = ROUND_TOL,
    rate_factor: float = LAMBDA_RATE_FACTOR,
) -> ModelState:
    """Shrink bond n to the numerical rank of the merged mean cores n and n+1.

    Components at a bond can stay energetic on one side while the other side
    has collapsed, or spread one direction over several indices; both leave
    the merged matrix W = A B (A: R_{n-1} I_n by R_n, B: R_n by
    I_{n+1} R_{n+1}) rank deficient. With W = U S V^T cut to the k singular
    values above ``tol * s_max``, the cores become A Q and P B with
    Q = B V_k S_k^-1/2 and P = S_k^-1/2 U_k^T A, whose product is the rank-k
    part of W. Slice covariances follow the same linear maps and
    q(lambda_n) is recomputed for the new components.
    """
    r = state.bonds[n]
    if r <= 1 or tol <= 0:
        return state
    nxt = (n + 1) % state.order
    cores = state.cores.mean.cores
    r_prev, extent, _ = cores[n].shape
    _, extent_next, r_after = cores[nxt].shape
    a = cores[n].reshape(r_prev * extent, r)
    b = cores[nxt].reshape(r, extent_next * r_after)
    u, s, vt = linalg.svd(a @ b, full_matrices=False)
    if s[0] == 0.0:
        return state
    k = max(1, int(np.sum(s > tol * s[0])))
    if k >= r:
        return state

    root = np.sqrt(s[:k])
    q = (b @ vt[:k].T) / root
    p = (u[:, :k].T @ a) / root[:, None]
    cores[n] = np.einsum("pir,rk->pik", cores[n], q)
    cores[nxt] = np.einsum("kr,rjq->kjq", p, cores[nxt])
    # vec(S Q) = (Q^T kron I) vec(S); vec(P T) = (I kron P) vec(T)
    state.cores.cov[n] = _congruence(np.kron(q.T, np.eye(r_prev)), state.cores.cov[n])
    state.cores.cov[nxt] = _congruence(np.kron(np.eye(r_after), p), state.cores.cov[nxt])

    state.priors.c[n] = state.priors.c[n][:k].copy()
    state.priors.d[n] = state.priors.d[n][:k].copy()
    state.lambdas.shape[n] = state.lambdas.shape[n][:k].copy()
    state.lambdas.rate[n] = state.lambdas.rate[n][:k].copy()
    update_lambda(state, n, rate_factor)
    state.cores.mean.validate()
    logger.info("Rounded bond %d: R %d -> %d (iter %d)", n, r, k, state.iteration)
    return state


# ── driver ───────────────────────────────────────────────────────────────


def observed_rmse(state: ModelState) -> float:
    x_hat = tr_entries(state.cores.mean, state.mask.multi)
    return float(np.sqrt(np.mean((state.observed_values - x_hat) ** 2)))


def _check_finite(state: ModelState) -> None:
    finite = (
        np.isfinite(state.tau.shape) and np.isfinite(state.tau.rate)
        and all(np.isfinite(c).all() for c in state.cores.mean.cores)
        and all(np.isfinite(v).all() for v in state.cores.cov)
        and all(np.isfinite(r).all() for r in state.lambdas.rate)
    )
    if not finite:
        diagnostics = {
            "iter": state.iteration,
            "ranks": list(state.bonds),
            "tau_shape": state.tau.shape,
            "tau_rate": state.tau.rate,
        }
        logger.error("Non-finite posterior values, aborting: %s", diagnostics)
        raise NumericalError("Non-finite values in the posterior", diagnostics=diagnostics)


def run_sweep_iteration(state: ModelState, config: FitConfig) -> ModelState:
    """One full pass of the update loop (cores, lambdas with pruning and rounding, tau)."""
    for n in range(state.order):
        update_core_factor(state, n, n_jobs=config.n_jobs)
    for n in range(state.order):
        update_lambda(state, n, config.lambda_rate_factor)
        if state.iteration > config.prune_burn_in:
            prune_ranks(state, config.prune_threshold, config.prune_rule, modes=[n])
            round_bond(state, n, config.round_tol, config.lambda_rate_factor)
    update_tau(state)
    return state


def fit(
    t: np.ndarray,
    mask: IndexSet,
    config: Optional[FitConfig] = None,
    callback: Optional[Callable[[ModelState, IterationRecord], None]] = None,
) -> Tuple[ModelState, List[IterationRecord]]:
    """Fit TR-VBI to the observed entries of ``t``.

    Stops when the relative change of E[tau] drops below ``config.tol`` or
    after ``config.max_iters`` sweeps. Returns the state and one
    :class:`IterationRecord` per sweep.
    """
    config = config or FitConfig()
    r_init = config.resolved_r_init(mask.shape)
    priors = Hyperpriors.broadcast(
        (r_init,) * len(mask.shape),
        a=config.priors_a, b=config.priors_b, c=config.priors_c, d=config.priors_d,
    )
    state = init_state(t, mask, r_init, priors, seed=config.seed)
    trace: List[IterationRecord] = []
    prev_tau = state.tau.expectation
    start = time.perf_counter()

    for it in range(1, config.max_iters + 1):
        state.iteration = it
        run_sweep_iteration(state, config)
        _check_finite(state)

        e_tau = state.tau.expectation
        record = IterationRecord(it, e_tau, list(state.bonds), observed_rmse(state))
        trace.append(record)
        logger.debug("iter %d: E[tau]=%.6e ranks=%s rmse=%.3e", it, e_tau, record.ranks, record.obs_rmse)
        if callback is not None:
            callback(state, record)

        if abs(e_tau - prev_tau) / e_tau < config.tol:
            logger.info("Converged after %d iterations (%.2fs), ranks=%s",
                        it, time.perf_counter() - start, record.ranks)
            break
        prev_tau = e_tau
    else:
        if config.max_iters:
            logger.info("Stopped at max_iters=%d, ranks=%s", config.max_iters, list(state.bonds))
    return state, trace


def complete(state: ModelState, overwrite_observed: bool = True) -> np.ndarray:
    """Posterior-mean reconstruction, optionally with observed entries restored."""
    x_hat = expected_reconstruction(state)
    if overwrite_observed:
        return state.mask.restore(x_hat, state.observations)
    return x_hat


def check_state(state: ModelState) -> None:
    """Raise NumericalError unless covariances are SPD and Gamma parameters positive."""
    state.check_consistency()
    for k, cov in enumerate(state.cores.cov):
        if not np.allclose(cov, np.swapaxes(cov, 1, 2)):
            raise NumericalError(f"Covariances of core {k} are not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise NumericalError(f"Covariances of core {k} are not positive definite")
    positive = state.tau.shape > 0 and state.tau.rate > 0 and all(
        (s > 0).all() and (r > 0).all() for s, r in zip(state.lambdas.shape, state.lambdas.rate)
    )
    if not positive:
        raise NumericalError("Gamma parameters must stay strictly positive")
