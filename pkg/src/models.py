"""Random-variable state of the Bayesian tensor-ring model.

The hierarchy is

* likelihood: observed entries ~ N(TR(G_0, ..., G_{N-1}), 1/tau)
* noise prior: tau ~ Gamma(a, b)
* factor prior: vec(G_k[:, i, :]) ~ N(0, diag(kron(lambda_k, lambda_{k-1}))^-1)
* hyperprior: lambda_k[r] ~ Gamma(c_k[r], d_k[r])

and the mean-field posterior keeps one Gaussian per core slice plus Gamma
factors for every lambda component and for tau. All Gamma expectations
are computed from their shape/rate pair on demand.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config import PRIOR_A, PRIOR_B, PRIOR_C, PRIOR_D
from src.errors import EmptyObservationError, ShapeError
from src.tensor import IndexSet, TRCores, broadcast_ranks, random_cores, tr_reconstruct, vec

logger = logging.getLogger(__name__)


@dataclass
class Hyperpriors:
    """Gamma shape/rate for tau (a, b) and per-component arrays for each lambda_k."""
    a: float
    b: float
    c: List[np.ndarray]
    d: List[np.ndarray]

    def __post_init__(self):
        self.c = [np.asarray(v, dtype=np.float64).copy() for v in self.c]
        self.d = [np.asarray(v, dtype=np.float64).copy() for v in self.d]
        if self.a <= 0 or self.b <= 0:
            raise ShapeError(f"Noise hyperpriors must be positive, got a={self.a}, b={self.b}")
        if len(self.c) != len(self.d):
            raise ShapeError("c and d must list one array per mode")
        for k, (c, d) in enumerate(zip(self.c, self.d)):
            if c.shape != d.shape or c.ndim != 1:
                raise ShapeError(f"Mode {k}: c and d must be equal-length vectors")
            if (c <= 0).any() or (d <= 0).any():
                raise ShapeError(f"Mode {k}: lambda hyperpriors must be positive")

    @classmethod
    def broadcast(
        cls,
        bonds: Sequence[int],
        a: float = PRIOR_A,
        b: float = PRIOR_B,
        c: float = PRIOR_C,
        d: float = PRIOR_D,
    ) -> "Hyperpriors":
        return cls(
            a=a,
            b=b,
            c=[np.full(r, c, dtype=np.float64) for r in bonds],
            d=[np.full(r, d, dtype=np.float64) for r in bonds],
        )

    def copy(self) -> "Hyperpriors":
        return Hyperpriors(self.a, self.b, self.c, self.d)


@dataclass
class CorePosterior:
    """q(G_k): slice means (as TR cores) and one covariance per slice.

    ``cov[k]`` has shape ``(I_k, R_{k-1} R_k, R_{k-1} R_k)`` indexed by the
    first-index-fastest slice vector.
    """
    mean: TRCores
    cov: List[np.ndarray]

    def slice_vectors(self, k: int) -> np.ndarray:
        """``(I_k, R_{k-1} R_k)`` array of vec(G_k[:, i, :])."""
        core = self.mean.cores[k]
        return np.moveaxis(core, 1, 0).reshape(core.shape[1], -1, order="F")

    def set_slice(self, k: int, i: int, g: np.ndarray, v: np.ndarray) -> None:
        core = self.mean.cores[k]
        core[:, i, :] = g.reshape(core.shape[0], core.shape[2], order="F")
        self.cov[k][i] = v

    def copy(self) -> "CorePosterior":
        return CorePosterior(self.mean.copy(), [v.copy() for v in self.cov])


@dataclass
class LambdaPosterior:
    """q(lambda_k) = prod_r Gamma(shape[k][r], rate[k][r])."""
    shape: List[np.ndarray]
    rate: List[np.ndarray]

    def expectation(self, k: int) -> np.ndarray:
        return self.shape[k] / self.rate[k]

    def copy(self) -> "LambdaPosterior":
        return LambdaPosterior([s.copy() for s in self.shape], [r.copy() for r in self.rate])


@dataclass
class TauPosterior:
    shape: float
    rate: float

    @property
    def expectation(self) -> float:
        return self.shape / self.rate


@dataclass
class ModelState:
    """Everything the VBI loop reads and writes, plus the data it fits."""
    cores: CorePosterior
    lambdas: LambdaPosterior
    tau: TauPosterior
    priors: Hyperpriors
    mask: IndexSet
    observations: np.ndarray
    seed: int = 0
    iteration: int = 0
    observed_values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.observed_values = self.mask.values(self.observations)

    @property
    def order(self) -> int:
        return self.cores.mean.order

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.cores.mean.dims

    @property
    def bonds(self) -> Tuple[int, ...]:
        return self.cores.mean.bonds

    def check_consistency(self) -> None:
        """Raise ShapeError unless every rank list agrees with the cores."""
        self.cores.mean.validate()
        for k, r in enumerate(self.bonds):
            core = self.cores.mean.cores[k]
            size = core.shape[0] * core.shape[2]
            lengths = {
                self.lambdas.shape[k].size, self.lambdas.rate[k].size,
                self.priors.c[k].size, self.priors.d[k].size,
            }
            if lengths != {r}:
                raise ShapeError(f"Mode {k}: lambda length(s) {sorted(lengths)} != R_{k}={r}")
            if self.cores.cov[k].shape != (core.shape[1], size, size):
                raise ShapeError(
                    f"Mode {k}: covariance shape {self.cores.cov[k].shape} does not track core {core.shape}"
                )

    def copy(self) -> "ModelState":
        return ModelState(
            cores=self.cores.copy(),
            lambdas=self.lambdas.copy(),
            tau=TauPosterior(self.tau.shape, self.tau.rate),
            priors=self.priors.copy(),
            mask=self.mask,
            observations=self.observations,
            seed=self.seed,
            iteration=self.iteration,
        )


def init_state(
    t: np.ndarray,
    mask: IndexSet,
    r_init: int,
    priors: Optional[Hyperpriors] = None,
    seed: int = 0,
) -> ModelState:
    """Initial posterior: N(0, 1) core means, identity covariances, q = prior.

    ``priors`` defaults to :meth:`Hyperpriors.broadcast` over ``r_init``;
    when given, its per-mode arrays must have length ``r_init``.
    """
    if r_init < 1:
        raise ShapeError(f"r_init must be >= 1, got {r_init}")
    if len(mask) == 0:
        raise EmptyObservationError("Cannot fit a model with zero observed entries")
    t = np.asarray(t, dtype=np.float64)
    dims = mask.shape
    bonds = broadcast_ranks(r_init, len(dims))
    if priors is None:
        priors = Hyperpriors.broadcast(bonds)
    elif [c.size for c in priors.c] != list(bonds):
        raise ShapeError(f"Hyperprior lengths {[c.size for c in priors.c]} do not match ranks {bonds}")

    rng = np.random.default_rng(seed)
    mean = random_cores(dims, bonds, rng)
    cov = [
        np.broadcast_to(np.eye(bonds[k - 1] * bonds[k]), (dims[k],) + (bonds[k - 1] * bonds[k],) * 2).copy()
        for k in range(len(dims))
    ]
    state = ModelState(
        cores=CorePosterior(mean, cov),
        lambdas=LambdaPosterior([c.copy() for c in priors.c], [d.copy() for d in priors.d]),
        tau=TauPosterior(priors.a, priors.b),
        priors=priors.copy(),
        mask=mask,
        observations=t,
        seed=seed,
    )
    logger.debug("Initialized state: dims=%s, r_init=%d, |O|=%d, seed=%d", dims, r_init, len(mask), seed)
    return state


def slice_moments(state: ModelState, k: int) -> np.ndarray:
    """E[g g^T] = mean mean^T + V for every slice of core k, ``(I_k, s, s)``."""
    g = state.cores.slice_vectors(k)
    return np.einsum("ia,ib->iab", g, g) + state.cores.cov[k]


def expected_slice_moment(state: ModelState, n: int, i_n: int) -> np.ndarray:
    g = vec(state.cores.mean.cores[n][:, i_n, :])
    return np.outer(g, g) + state.cores.cov[n][i_n]


def slice_second_moments(state: ModelState, k: int) -> np.ndarray:
    """Elementwise E[G_k^2] arranged as ``(I_k, R_{k-1}, R_k)``."""
    core = state.cores.mean.cores[k]
    rl, extent, rr = core.shape
    diag = np.diagonal(state.cores.cov[k], axis1=1, axis2=2).reshape(extent, rl, rr, order="F")
    return np.moveaxis(core, 1, 0) ** 2 + diag


def prior_precision(state: ModelState, k: int) -> np.ndarray:
    """Diagonal of E[Lambda] for vec(G_k[:, i, :]); index p + R_{k-1} q gets lam_{k-1}[p] lam_k[q]."""
    return np.kron(state.lambdas.expectation(k), state.lambdas.expectation((k - 1) % state.order))


def expected_reconstruction(state: ModelState) -> np.ndarray:
    return tr_reconstruct(state.cores.mean)


def state_nbytes(state: ModelState, include_cov: bool = True) -> int:
    """Bytes held by the posterior: cores, lambda and tau parameters, covariances."""
    total = state.cores.mean.nbytes()
    total += sum(s.nbytes + r.nbytes for s, r in zip(state.lambdas.shape, state.lambdas.rate))
    total += 2 * np.dtype(np.float64).itemsize
    if include_cov:
        total += sum(v.nbytes for v in state.cores.cov)
    return total
