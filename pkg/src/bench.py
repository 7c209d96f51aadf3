"""Synthetic data, masks, metrics and experiment sweeps."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.baselines import tr_als_fit
from src.config import (
    DEFAULT_REPETITIONS,
    PSNR_SENTINEL,
    SUCCESS_BAND,
    SWEEP_COLUMNS,
    ALSConfig,
    FitConfig,
    load_config_file,
    parse_int_list,
)
from src.errors import ConfigError, EmptyObservationError, MetricError, ShapeError, TRError
from src.tensor import IndexSet, TRCores, broadcast_ranks, check_shape, random_cores, tr_reconstruct
from src.vbi import complete, fit

logger = logging.getLogger(__name__)

METHODS = ("tr-vbi", "tr-als", "tr-als-vbi-ranks", "mean-fill")


# ── data ─────────────────────────────────────────────────────────────────


def gen_synthetic(
    dims: Sequence[int],
    ranks: Union[int, Sequence[int]],
    snr_db: Optional[float],
    seed: int,
) -> Tuple[np.ndarray, np.ndarray, TRCores]:
    """Exact TR tensor from N(0, 1) cores, plus a Gaussian-noise copy.

    The noise is rescaled so that 10 log10(var(clean) / var(noise)) equals
    ``snr_db`` exactly; ``snr_db=None`` returns an identical noisy copy.
    """
    dims = check_shape(dims)
    rng = np.random.default_rng(seed)
    cores = random_cores(dims, ranks, rng)
    clean = tr_reconstruct(cores)
    return clean, add_noise(clean, snr_db, rng), cores


def add_noise(clean: np.ndarray, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise rescaled so the variance ratio matches ``snr_db`` exactly."""
    if snr_db is None:
        return np.array(clean, dtype=np.float64)
    noise = rng.standard_normal(np.shape(clean))
    noise_std = math.sqrt(float(np.var(clean)) / 10.0 ** (snr_db / 10.0))
    noise *= noise_std / float(np.std(noise))
    return clean + noise


def sample_mask(shape: Sequence[int], mr: float, seed: int) -> IndexSet:
    """Uniformly chosen observed set with round((1 - mr) * size) entries."""
    shape = check_shape(shape)
    if not 0.0 <= mr < 1.0:
        raise ConfigError(f"Missing ratio must be in [0, 1), got {mr}")
    total = int(np.prod(shape))
    n_obs = int(math.floor((1.0 - mr) * total + 0.5))
    if n_obs == 0:
        raise EmptyObservationError(f"mr={mr} leaves no observed entries out of {total}")
    rng = np.random.default_rng(seed)
    return IndexSet(shape, rng.choice(total, size=n_obs, replace=False))


def mean_fill(t: np.ndarray, mask: IndexSet) -> np.ndarray:
    """Missing entries replaced by the mean of the observed ones."""
    return mask.restore(np.full(mask.shape, float(np.mean(mask.values(t)))), t)


# ── metrics ──────────────────────────────────────────────────────────────


def rse(est: np.ndarray, truth: np.ndarray) -> float:
    if np.shape(est) != np.shape(truth):
        raise ShapeError(f"RSE of shapes {np.shape(est)} and {np.shape(truth)}")
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise MetricError("RSE is undefined for an all-zero reference tensor")
    return float(np.linalg.norm(np.asarray(est) - np.asarray(truth))) / denom


def psnr(est: np.ndarray, truth: np.ndarray, max_val: float = 1.0) -> float:
    """PSNR in dB; an exact match reports ``PSNR_SENTINEL``."""
    if np.shape(est) != np.shape(truth):
        raise ShapeError(f"PSNR of shapes {np.shape(est)} and {np.shape(truth)}")
    mse = float(np.mean((np.asarray(est) - np.asarray(truth)) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(max_val ** 2 / mse)


def air_var(rank_lists: Sequence[Sequence[int]]) -> Tuple[float, float]:
    """Mean over runs of each run's mean rank, and of each run's rank std."""
    if not rank_lists:
        raise MetricError("air_var needs at least one run")
    runs = [np.asarray(r, dtype=np.float64) for r in rank_lists]
    return float(np.mean([r.mean() for r in runs])), float(np.mean([r.std() for r in runs]))


def rank_success(air: float, r_true: float, band: float = SUCCESS_BAND) -> bool:
    return r_true - band <= air <= r_true + band


# ── records ──────────────────────────────────────────────────────────────


def _fmt_ints(values: Optional[Iterable[int]], sep: str = ",") -> str:
    return "" if values is None else sep.join(str(int(v)) for v in values)


@dataclass
class ExperimentRecord:
    """One benchmark run: configuration plus the metrics it produced."""
    method: str
    dims: Tuple[int, ...]
    ranks_true: Tuple[int, ...]
    r_init: Optional[int]
    mr: float
    snr_db: Optional[float]
    seed: int
    ranks_inferred: Optional[Tuple[int, ...]] = None
    rse: float = float("nan")
    psnr: float = float("nan")
    air: Optional[float] = None
    var: Optional[float] = None
    iters: int = 0
    wall_s: float = 0.0
    error: str = ""

    def to_row(self) -> Dict:
        row = asdict(self)
        row["dims"] = _fmt_ints(self.dims, "x")
        row["ranks_true"] = _fmt_ints(self.ranks_true)
        row["ranks_inferred"] = _fmt_ints(self.ranks_inferred)
        return row


@dataclass
class SweepSpec:
    """Grid of method x MR x SNR cells, each repeated ``repetitions`` times."""
    methods: Tuple[str, ...] = ("tr-vbi",)
    dims: Tuple[int, ...] = (10, 10, 10, 10)
    ranks_true: Tuple[int, ...] = (3,)
    r_init: Optional[int] = None
    mr: Tuple[float, ...] = (0.1,)
    snr_db: Tuple[Optional[float], ...] = (20.0,)
    repetitions: int = DEFAULT_REPETITIONS
    master_seed: int = 0
    max_iters: int = FitConfig.max_iters
    tol: float = FitConfig.tol
    als_max_iters: int = ALSConfig.max_iters
    psnr_max: Optional[float] = None
    n_jobs: int = 1
    fit_overrides: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"Unknown methods {sorted(unknown)}; choose from {METHODS}")

    @property
    def true_bonds(self) -> Tuple[int, ...]:
        ranks = self.ranks_true[0] if len(self.ranks_true) == 1 else self.ranks_true
        return broadcast_ranks(ranks, len(self.dims))

    def cells(self) -> List[Tuple[str, float, Optional[float], int]]:
        return [
            (method, mr, snr, rep)
            for method in self.methods
            for mr in self.mr
            for snr in self.snr_db
            for rep in range(self.repetitions)
        ]

    @classmethod
    def from_file(cls, path: str) -> "SweepSpec":
        """Flat key=value file; list-valued keys are comma separated."""
        raw = load_config_file(path)
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: Dict[str, str]) -> "SweepSpec":
        parsers = {
            "methods": lambda v: tuple(m.strip() for m in v.split(",") if m.strip()),
            "dims": parse_int_list,
            "ranks_true": parse_int_list,
            "r_init": lambda v: None if v.strip().lower() in ("", "none", "auto") else int(v),
            "mr": lambda v: tuple(float(x) for x in v.split(",") if x.strip()),
            "snr_db": lambda v: tuple(
                None if x.strip().lower() == "none" else float(x) for x in v.split(",") if x.strip()
            ),
            "repetitions": int,
            "master_seed": int,
            "max_iters": int,
            "tol": float,
            "als_max_iters": int,
            "psnr_max": lambda v: None if v.strip().lower() == "none" else float(v),
            "n_jobs": int,
        }
        kwargs: Dict = {}
        overrides: Dict[str, str] = {}
        for key, value in raw.items():
            name = key.replace(".", "_").replace("-", "_")
            if name in parsers:
                try:
                    kwargs[name] = parsers[name](value)
                except ValueError as e:
                    raise ConfigError(f"Bad value for {key!r}: {value!r} ({e})") from e
            elif name.startswith("fit_"):
                overrides[name[len("fit_"):]] = value
            else:
                raise ConfigError(f"Unknown sweep key: {key!r}")
        spec = cls(**kwargs, fit_overrides=overrides)
        FitConfig.from_mapping(overrides)
        return spec


def cell_seed(master_seed: int, *keys: int) -> int:
    """Independent, reproducible seed for one cell of a sweep."""
    return int(np.random.SeedSequence([master_seed, *keys]).generate_state(1)[0])


def run_cell(spec: SweepSpec, method: str, mr: float, snr_db: Optional[float], rep: int) -> ExperimentRecord:
    """Generate data for one repetition, run one method and score it.

    Data and mask depend only on (master seed, repetition, MR), so every
    method in a sweep sees the same problem.
    """
    data_seed = cell_seed(spec.master_seed, rep)
    mask_seed = cell_seed(spec.master_seed, rep, int(round(mr * 1e6)))
    bonds = spec.true_bonds
    record = ExperimentRecord(
        method=method, dims=tuple(spec.dims), ranks_true=bonds, r_init=spec.r_init,
        mr=mr, snr_db=snr_db, seed=data_seed,
    )
    start = time.perf_counter()
    try:
        clean, noisy, _ = gen_synthetic(spec.dims, bonds, snr_db, data_seed)
        mask = sample_mask(spec.dims, mr, mask_seed)
        est = _run_method(spec, method, noisy, mask, bonds, data_seed, record)
        record.rse = rse(est, clean)
        peak = spec.psnr_max if spec.psnr_max is not None else float(np.abs(clean).max())
        record.psnr = psnr(est, clean, peak)
    except (TRError, np.linalg.LinAlgError) as e:
        logger.warning("Cell %s mr=%s snr=%s rep=%d failed: %s", method, mr, snr_db, rep, e)
        record.error = f"{type(e).__name__}: {e}"
    record.wall_s = time.perf_counter() - start
    return record


def _run_method(spec, method, noisy, mask, bonds, seed, record: ExperimentRecord) -> np.ndarray:
    if method == "mean-fill":
        return mean_fill(noisy, mask)
    if method == "tr-als":
        trace: List[float] = []
        cores = tr_als_fit(noisy, mask, bonds, ALSConfig(ranks=bonds, max_iters=spec.als_max_iters, seed=seed), trace)
        record.iters = len(trace)
        return mask.restore(tr_reconstruct(cores), noisy)

    base = FitConfig(r_init=spec.r_init, max_iters=spec.max_iters, tol=spec.tol, seed=seed)
    config = FitConfig.from_mapping(spec.fit_overrides, base=base)
    state, trace = fit(noisy, mask, config)
    record.r_init = config.resolved_r_init(spec.dims)
    inferred = tuple(state.bonds)
    record.ranks_inferred = inferred
    record.air, record.var = air_var([inferred])
    if method == "tr-vbi":
        record.iters = len(trace)
        return complete(state, config.overwrite_observed)

    # tr-als-vbi-ranks: TR-ALS restarted with the ranks TR-VBI found
    als_trace: List[float] = []
    cores = tr_als_fit(noisy, mask, inferred, ALSConfig(ranks=inferred, max_iters=spec.als_max_iters, seed=seed), als_trace)
    record.iters = len(trace) + len(als_trace)
    return mask.restore(tr_reconstruct(cores), noisy)


def records_frame(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    columns = list(SWEEP_COLUMNS) + ["error"]
    return pd.DataFrame([r.to_row() for r in records], columns=columns)


def run_sweep(spec: SweepSpec, csv_path: Optional[str] = None) -> List[ExperimentRecord]:
    """Run every cell of ``spec`` (in a joblib pool when ``n_jobs != 1``) and write the CSV."""
    cells = spec.cells()
    logger.info("Running sweep with %d cells (n_jobs=%d)", len(cells), spec.n_jobs)
    if spec.n_jobs == 1 or not cells:
        records = [run_cell(spec, *cell) for cell in cells]
    else:
        records = Parallel(n_jobs=spec.n_jobs)(delayed(run_cell)(spec, *cell) for cell in cells)
    if csv_path is not None:
        records_frame(records).to_csv(csv_path, index=False)
        logger.info("Wrote %d records to %s", len(records), csv_path)
    failed = sum(1 for r in records if r.error)
    if failed:
        logger.warning("%d of %d cells failed", failed, len(records))
    return list(records)


def summarize(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    """Mean and std of RSE/PSNR per (method, MR, SNR); AIR/Var and success for rank-inferring methods."""
    rows = []
    keyed: Dict[Tuple, List[ExperimentRecord]] = {}
    for r in records:
        if not r.error:
            keyed.setdefault((r.method, r.mr, r.snr_db), []).append(r)
    for (method, mr, snr), group in keyed.items():
        rses = np.array([r.rse for r in group])
        psnrs = np.array([r.psnr for r in group])
        row = {
            "method": method, "mr": mr, "snr_db": snr, "runs": len(group),
            "rse_mean": rses.mean(), "rse_std": rses.std(),
            "rse_median": float(np.median(rses)),
            "psnr_mean": psnrs.mean(), "psnr_std": psnrs.std(),
            "air": None, "var": None, "success": None,
        }
        inferred = [r.ranks_inferred for r in group if r.ranks_inferred]
        if inferred:
            row["air"], row["var"] = air_var(inferred)
            r_true = float(np.mean(group[0].ranks_true))
            row["success"] = rank_success(row["air"], r_true)
        rows.append(row)
    return pd.DataFrame(rows)


def parse_snr(raw: Optional[str]) -> Optional[float]:
    if raw is None or str(raw).strip().lower() in ("", "none"):
        return None
    return float(raw)


__all__ = [
    "ExperimentRecord", "SweepSpec", "METHODS",
    "gen_synthetic", "add_noise", "sample_mask", "mean_fill", "rse", "psnr", "air_var",
    "rank_success", "run_cell", "run_sweep", "summarize", "records_frame",
    "cell_seed", "parse_snr",
]
