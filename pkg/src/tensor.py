"""Dense tensor algebra for the tensor-ring (TR) format.

Conventions used across the package:

* A dense tensor is a ``float64`` ``numpy.ndarray``; vectorization is
  first-index-fastest (``order="F"``), so ``vec``/``ten`` and every slice
  covariance share one linearization.
* Modes are 0-based. Core ``k`` has shape ``(R_{k-1}, I_k, R_k)`` with the
  ring closed by ``R_{-1} = R_{N-1}``; ``TRCores.bonds[k]`` is ``R_k``.
* The slice vector of core ``k`` at ``i`` is ``vec(G_k[:, i, :])`` of length
  ``R_{k-1} * R_k``, index ``p + R_{k-1} * q``.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def check_shape(dims: Sequence[int], min_order: int = 2) -> Shape:
    """Validate extents and return them as a tuple."""
    shape = tuple(int(d) for d in dims)
    if len(shape) < min_order:
        raise ShapeError(f"Tensor order must be >= {min_order}, got shape {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"All extents must be >= 1, got {shape}")
    if int(np.prod(shape, dtype=object)) > np.iinfo(np.int64).max:
        raise ShapeError(f"Element count of {shape} overflows int64")
    return shape


# ── elementary operations ────────────────────────────────────────────────


def vec(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1, order="F")


def ten(v: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shape = tuple(int(d) for d in shape)
    if v.size != int(np.prod(shape)):
        raise ShapeError(f"Cannot fold {v.size} entries into shape {shape}")
    return np.array(v.reshape(shape, order="F"))


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron expects matrices, got {a.shape} and {b.shape}")
    return np.kron(a, b)


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"Hadamard product of shapes {np.shape(x)} and {np.shape(y)}")
    return np.multiply(x, y, dtype=np.float64)


def tensor_permute(x: np.ndarray, n: int) -> np.ndarray:
    """Cyclic mode shift: axes ``(n, ..., N-1, 0, ..., n-1)``; ``n=0`` copies."""
    order = np.ndim(x)
    if not 0 <= n < order:
        raise ShapeError(f"Mode {n} out of range for order-{order} tensor")
    axes = tuple(range(n, order)) + tuple(range(n))
    return np.array(np.transpose(x, axes), dtype=np.float64)


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """K_{mn} with ``K @ vec(A) == vec(A.T)`` for every m-by-n matrix A."""
    if m < 1 or n < 1:
        raise ShapeError(f"commutation_matrix sizes must be >= 1, got ({m}, {n})")
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    k = np.zeros((m * n, m * n))
    k[(j + n * i).ravel(), (i + m * j).ravel()] = 1.0
    return k


# ── second moments of matrix slices ──────────────────────────────────────


def kron_moment(moment: np.ndarray, r_left: int, r_right: int) -> np.ndarray:
    """Rearrange E[vec(M) vec(M)^T] into E[M kron M].

    ``M`` is ``r_left`` by ``r_right``. Leading batch axes are kept. The
    result is indexed ``[i * r_left + k, j * r_right + l] = E[M_ij M_kl]``,
    so products of such matrices follow products of the ``M``.
    """
    moment = np.asarray(moment, dtype=np.float64)
    size = r_left * r_right
    if moment.shape[-2:] != (size, size):
        raise ShapeError(f"Moment shape {moment.shape[-2:]} does not match {r_left}x{r_right} slices")
    batch = moment.shape[:-2]
    t = moment.reshape(batch + (r_right, r_left, r_right, r_left))
    nb = len(batch)
    axes = tuple(range(nb)) + (nb + 1, nb + 3, nb, nb + 2)
    return t.transpose(axes).reshape(batch + (r_left * r_left, r_right * r_right))


def moment_from_kron(kf: np.ndarray, r_left: int, r_right: int) -> np.ndarray:
    """Inverse of :func:`kron_moment`."""
    kf = np.asarray(kf, dtype=np.float64)
    batch = kf.shape[:-2]
    t = kf.reshape(batch + (r_left, r_left, r_right, r_right))
    nb = len(batch)
    axes = tuple(range(nb)) + (nb + 2, nb, nb + 3, nb + 1)
    size = r_left * r_right
    return t.transpose(axes).reshape(batch + (size, size))


def kron_moment_reference(moment: np.ndarray, r_left: int, r_right: int) -> np.ndarray:
    """Same as :func:`kron_moment`, through ``(I ⊗ K ⊗ I) vec(moment)``.

    Builds an ``(r_left r_right)^2`` square permutation, so it is only meant
    for checking the fast path on small ranks.
    """
    perm = kron(kron(np.eye(r_right), commutation_matrix(r_right, r_left)), np.eye(r_left))
    return ten(perm @ vec(moment), (r_left * r_left, r_right * r_right))


# ── tensor ring cores ────────────────────────────────────────────────────


@dataclass
class TRCores:
    """Ordered ring of 3-order cores; core k is ``(R_{k-1}, I_k, R_k)``."""
    cores: List[np.ndarray]

    def __post_init__(self):
        self.cores = [np.asarray(c, dtype=np.float64) for c in self.cores]
        self.validate()

    def validate(self) -> None:
        if len(self.cores) < 2:
            raise ShapeError(f"A tensor ring needs at least 2 cores, got {len(self.cores)}")
        for k, core in enumerate(self.cores):
            if core.ndim != 3:
                raise ShapeError(f"Core {k} must be 3-order, got shape {core.shape}")
            if min(core.shape) < 1:
                raise ShapeError(f"Core {k} has an empty axis: {core.shape}")
        n = len(self.cores)
        for k in range(n):
            right = self.cores[k].shape[2]
            left = self.cores[(k + 1) % n].shape[0]
            if right != left:
                raise ShapeError(
                    f"Rank mismatch between core {k} (R={right}) and core {(k + 1) % n} (R={left})"
                )

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def dims(self) -> Shape:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def bonds(self) -> Tuple[int, ...]:
        """(R_0, ..., R_{N-1}) with ``bonds[k]`` the right rank of core k."""
        return tuple(c.shape[2] for c in self.cores)

    @property
    def ranks(self) -> List[int]:
        """Ring ranks R_0..R_N in the math notation (first equals last)."""
        return [self.cores[0].shape[0]] + [c.shape[2] for c in self.cores]

    def shifted(self, n: int) -> "TRCores":
        """Circular shift so core ``n`` comes first."""
        return TRCores(self.cores[n:] + self.cores[:n])

    def copy(self) -> "TRCores":
        return TRCores([c.copy() for c in self.cores])

    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.cores)


def broadcast_ranks(ranks: Union[int, Sequence[int]], order: int) -> Tuple[int, ...]:
    """Expand an int to ``order`` equal bond ranks, or validate a list of them."""
    if isinstance(ranks, (int, np.integer)):
        bonds = (int(ranks),) * order
    else:
        bonds = tuple(int(r) for r in ranks)
    if len(bonds) != order:
        raise ShapeError(f"Expected {order} ranks, got {len(bonds)}: {bonds}")
    if any(r < 1 for r in bonds):
        raise ShapeError(f"Ranks must be >= 1, got {bonds}")
    return bonds


def random_cores(
    dims: Sequence[int],
    ranks: Union[int, Sequence[int]],
    rng: np.random.Generator,
    scale: float = 1.0,
) -> TRCores:
    """Cores with i.i.d. N(0, scale^2) entries."""
    dims = check_shape(dims)
    bonds = broadcast_ranks(ranks, len(dims))
    cores = [
        scale * rng.standard_normal((bonds[k - 1], dims[k], bonds[k]))
        for k in range(len(dims))
    ]
    return TRCores(cores)


def _as_core_list(cores: Union[TRCores, Sequence[np.ndarray]]) -> List[np.ndarray]:
    if isinstance(cores, TRCores):
        return cores.cores
    return [np.asarray(c, dtype=np.float64) for c in cores]


def tcp(cores: Union[TRCores, Sequence[np.ndarray]]) -> np.ndarray:
    """Tensor connection product of consecutive cores.

    Returns a ``(R_first, prod(I), R_last)`` tensor whose lateral slice at the
    first-index-fastest multi-index ``(i_1, ..., i_k)`` is the matrix product
    of the corresponding core slices.
    """
    core_list = _as_core_list(cores)
    if not core_list:
        raise ShapeError("tcp needs at least one core")
    for k, core in enumerate(core_list):
        if core.ndim != 3:
            raise ShapeError(f"Core {k} must be 3-order, got shape {core.shape}")
    acc = np.array(core_list[0])
    for k, core in enumerate(core_list[1:], 1):
        if acc.shape[2] != core.shape[0]:
            raise ShapeError(
                f"Rank mismatch in tcp at core {k}: {acc.shape[2]} vs {core.shape[0]}"
            )
        merged = np.tensordot(acc, core, axes=([2], [0]))
        ra, p, i, rc = merged.shape
        acc = merged.reshape((ra, p * i, rc), order="F")
    return acc


def tr_reconstruct(cores: Union[TRCores, Sequence[np.ndarray]]) -> np.ndarray:
    """Full tensor with entries ``Trace(G_0[:, i_0, :] ... G_{N-1}[:, i_{N-1}, :])``."""
    ring = cores if isinstance(cores, TRCores) else TRCores(list(cores))
    merged = tcp(ring)
    return ten(np.einsum("aqa->q", merged), ring.dims)


def tr_entries(cores: TRCores, multi: np.ndarray, batch: int = 4096) -> np.ndarray:
    """Entries of the TR tensor at the given multi-indices, one per row."""
    multi = np.asarray(multi, dtype=np.int64).reshape(-1, cores.order)
    out = np.empty(multi.shape[0])
    for start in range(0, multi.shape[0], batch):
        idx = multi[start:start + batch]
        prod = slice_stack(cores.cores[0], idx[:, 0])
        for k in range(1, cores.order):
            prod = np.matmul(prod, slice_stack(cores.cores[k], idx[:, k]))
        out[start:start + batch] = np.einsum("bii->b", prod)
    return out


def cyclic_order(order: int, n: int) -> List[int]:
    """Modes after ``n`` around the ring: ``n+1, ..., N-1, 0, ..., n-1``."""
    if not 0 <= n < order:
        raise ShapeError(f"Mode {n} out of range for order {order}")
    return [(n + j) % order for j in range(1, order)]


def subchain(cores: TRCores, n: int) -> np.ndarray:
    """G^{!=n}: TCP of every core except ``n``, taken in cyclic order.

    Shape ``(R_n, prod_{k != n} I_k, R_{n-1})``.
    """
    return tcp([cores.cores[k] for k in cyclic_order(cores.order, n)])


def expected_inner_product(cores: TRCores, covariances: Sequence[np.ndarray]) -> float:
    """E[<vec X, vec X>] for a TR tensor whose slices are independent Gaussians.

    ``covariances[k]`` has shape ``(I_k, R_{k-1} R_k, R_{k-1} R_k)``. The sum
    over every multi-index factorizes into a product of per-mode sums of
    E[G ⊗ G], closed by a trace.
    """
    chain: Optional[np.ndarray] = None
    for k, core in enumerate(cores.cores):
        rl, _, rr = core.shape
        g = np.moveaxis(core, 1, 0).reshape(core.shape[1], -1, order="F")
        moment = np.einsum("ia,ib->iab", g, g) + covariances[k]
        summed = kron_moment(moment, rl, rr).sum(axis=0)
        chain = summed if chain is None else chain @ summed
    return float(np.trace(chain))


# ── observed index sets ──────────────────────────────────────────────────


class IndexSet:
    """Observed multi-indices of a tensor with per-mode slice buckets.

    ``linear`` holds the sorted first-index-fastest linear indices. For mode
    ``n`` and slice ``i``, ``bucket(n, i)`` gives positions into ``linear``
    ordered by the cyclic linearization ``(i_{n+1}, ..., i_{n-1})``.
    """

    def __init__(self, shape: Sequence[int], linear: Union[np.ndarray, Sequence[int]]):
        self.shape: Shape = check_shape(shape)
        lin = np.asarray(linear, dtype=np.int64).ravel()
        total = int(np.prod(self.shape))
        if lin.size and (lin.min() < 0 or lin.max() >= total):
            raise ShapeError(f"Observed index out of bounds for shape {self.shape}")
        unique = np.unique(lin)
        if unique.size != lin.size:
            raise ShapeError("Observed indices must be unique")
        self.linear = unique
        if unique.size:
            self.multi = np.stack(np.unravel_index(unique, self.shape, order="F"), axis=1)
        else:
            self.multi = np.zeros((0, len(self.shape)), dtype=np.int64)
        self._buckets = [self._bucket_mode(n) for n in range(len(self.shape))]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "IndexSet":
        mask = np.asarray(mask).astype(bool)
        return cls(mask.shape, np.flatnonzero(mask.reshape(-1, order="F")))

    @classmethod
    def full(cls, shape: Sequence[int]) -> "IndexSet":
        return cls(shape, np.arange(int(np.prod(tuple(shape)))))

    @classmethod
    def from_multi(cls, shape: Sequence[int], multi: np.ndarray) -> "IndexSet":
        multi = np.asarray(multi, dtype=np.int64).reshape(-1, len(shape))
        if multi.size and ((multi < 0).any() or (multi >= np.asarray(shape)).any()):
            raise ShapeError(f"Observed index out of bounds for shape {tuple(shape)}")
        return cls(shape, np.ravel_multi_index(tuple(multi.T), tuple(shape), order="F"))

    def _bucket_mode(self, n: int) -> List[np.ndarray]:
        extent = self.shape[n]
        if not self.linear.size:
            return [np.zeros(0, dtype=np.int64) for _ in range(extent)]
        rest = cyclic_order(len(self.shape), n)
        cyc = np.ravel_multi_index(
            tuple(self.multi[:, k] for k in rest),
            tuple(self.shape[k] for k in rest),
            order="F",
        )
        slice_idx = self.multi[:, n]
        order = np.lexsort((cyc, slice_idx))
        counts = np.bincount(slice_idx, minlength=extent)
        return np.split(order, np.cumsum(counts)[:-1])

    def bucket(self, n: int, i: int) -> np.ndarray:
        return self._buckets[n][i]

    def __len__(self) -> int:
        return int(self.linear.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IndexSet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.linear, other.linear)

    def to_mask(self) -> np.ndarray:
        flat = np.zeros(int(np.prod(self.shape)), dtype=bool)
        flat[self.linear] = True
        return flat.reshape(self.shape, order="F")

    def values(self, t: np.ndarray) -> np.ndarray:
        """Observed entries of ``t`` in ``linear`` order."""
        if np.shape(t) != self.shape:
            raise ShapeError(f"Tensor shape {np.shape(t)} does not match mask shape {self.shape}")
        return vec(t)[self.linear]

    def restore(self, x_hat: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Copy of ``x_hat`` with the observed entries taken from ``t``."""
        if np.shape(x_hat) != self.shape:
            raise ShapeError(f"Estimate shape {np.shape(x_hat)} does not match mask shape {self.shape}")
        flat = vec(x_hat).copy()
        flat[self.linear] = self.values(t)
        return ten(flat, self.shape)

    def nbytes(self) -> int:
        return self.linear.nbytes + self.multi.nbytes


def cyclic_unfold_observed(
    t: np.ndarray, mask: IndexSet, n: int, i_n: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Observed entries of mode-``n`` slice ``i_n`` in cyclic order.

    Returns the values and their complementary multi-indices, one row per
    entry, with columns ordered as ``cyclic_order(N, n)``.
    """
    if not 0 <= i_n < mask.shape[n]:
        raise ShapeError(f"Slice {i_n} out of range for mode {n} of extent {mask.shape[n]}")
    pos = mask.bucket(n, i_n)
    rest = cyclic_order(len(mask.shape), n)
    values = mask.values(t)[pos]
    return values, mask.multi[pos][:, rest]


def slice_stack(core: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gather lateral slices ``core[:, idx, :]`` as a ``(len(idx), R_l, R_r)`` stack."""
    return np.moveaxis(core, 1, 0)[idx]


def design_rows(cores: TRCores, comp: np.ndarray, n: int) -> np.ndarray:
    """Rows of the observed subchain unfolding for mode ``n``.

    For each complementary index row of ``comp`` (as returned by
    :func:`cyclic_unfold_observed`), ``S`` is the ``(R_n, R_{n-1})`` product of
    the other cores' slices and the row is ``vec(S^T)``, so the entry equals
    ``row @ vec(G_n[:, i_n, :])``.
    """
    rest = cyclic_order(cores.order, n)
    rl = cores.cores[n].shape[0]
    rr = cores.cores[n].shape[2]
    m = comp.shape[0]
    prod = slice_stack(cores.cores[rest[0]], comp[:, 0])
    for j, k in enumerate(rest[1:], 1):
        prod = np.matmul(prod, slice_stack(cores.cores[k], comp[:, j]))
    return prod.reshape(m, rr * rl)
