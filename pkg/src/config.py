"""Application configuration constants and the config objects built from them."""

import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

from src.errors import ConfigError

logger = logging.getLogger(__name__)

# Hyperpriors (Gamma shape/rate for tau and every lambda component)
PRIOR_A = 1e-7
PRIOR_B = 1e-7
PRIOR_C = 1e-7
PRIOR_D = 1e-7

# TR-VBI loop
MAX_ITERS = 200
TOL = 1e-5
R_INIT_CAP = 10
PRUNE_THRESHOLD = 1e-6
PRUNE_BURN_IN = 2
PRUNE_RULES = ("power", "lambda")

# Factor on the weighted core energies in the lambda rate (shape uses 1/2 per
# element); 0.25 over-shrinks the cores towards zero
LAMBDA_RATE_FACTOR = 0.5

# Bond rounding: singular values of the merged neighbouring mean cores below
# ROUND_TOL times the largest are cut; 0 disables
ROUND_TOL = 1e-6

# Symmetric solves: jitter = JITTER_SCALE * trace/size, escalated by JITTER_GROWTH
JITTER_SCALE = 1e-12
JITTER_GROWTH = 10.0
JITTER_RETRIES = 3

# Moment chains are evaluated in batches of this many observed entries
MOMENT_BATCH = 2048

# TR-ALS baseline
ALS_RIDGE = 1e-10
ALS_MAX_ITERS = 100
ALS_TOL = 1e-8

# Benchmark harness
DEFAULT_REPETITIONS = 10
PSNR_SENTINEL = 999.0
SUCCESS_BAND = 0.25
SWEEP_COLUMNS = (
    "method", "dims", "ranks_true", "r_init", "mr", "snr_db", "seed",
    "ranks_inferred", "rse", "psnr", "air", "var", "iters", "wall_s",
)

# Images
PIXEL_MAX = 255.0
IMAGE_PRESETS: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {
    "lena": ((256, 256, 3), (4, 4, 4, 4, 4, 4, 4, 4, 3)),
    "bird": ((320, 480, 3), (4, 4, 4, 5, 4, 4, 5, 6, 3)),
    "dragonfly": ((320, 480, 3), (4, 4, 4, 5, 4, 4, 5, 6, 3)),
    "einstein": ((600, 600, 3), (6, 10, 10, 6, 10, 10, 3)),
    "small64": ((64, 64, 3), (4, 4, 4, 4, 4, 4, 3)),
}

# Output locations used by the scripts
RESULTS_DIR = os.path.join("results")


# ── value parsing ────────────────────────────────────────────────────────


def parse_bool(raw: Union[str, bool]) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Not a boolean: {raw!r}")


def parse_ranks(raw: Union[str, int, Sequence[int]]) -> Union[int, Tuple[int, ...]]:
    """Parse ``"3"`` into 3 and ``"2,3,2"`` into (2, 3, 2)."""
    if isinstance(raw, int):
        return raw
    if isinstance(raw, (list, tuple)):
        return tuple(int(r) for r in raw)
    parts = [p.strip() for p in str(raw).split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"Empty rank list: {raw!r}")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"Bad rank list {raw!r}: {e}") from e
    return values[0] if len(values) == 1 else values


def parse_int_list(raw: Union[str, Sequence[int]]) -> Tuple[int, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(int(v) for v in raw)
    try:
        return tuple(int(p) for p in str(raw).split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"Bad integer list {raw!r}: {e}") from e


def _optional_int(raw: Any) -> Optional[int]:
    if raw is None or str(raw).strip().lower() in ("", "none", "auto"):
        return None
    return int(raw)


def _prune_rule(raw: Any) -> str:
    rule = str(raw).strip().lower()
    if rule not in PRUNE_RULES:
        raise ConfigError(f"prune_rule must be one of {PRUNE_RULES}, got {raw!r}")
    return rule


def load_config_file(path: str) -> Dict[str, str]:
    """Read a flat ``key=value`` file into a dict of raw strings.

    Blank lines and ``#`` comments are skipped. Keys are lower-cased and
    dotted names are kept as written (``priors.a``).
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().lower()] = value.strip()
    logger.debug("Loaded %d config keys from %s", len(values), path)
    return values


def _apply(obj: Any, raw: Mapping[str, Any], parsers: Mapping[str, Callable[[Any], Any]]):
    updates = {}
    for key, value in raw.items():
        name = key.strip().lower().replace(".", "_").replace("-", "_")
        if name not in parsers:
            raise ConfigError(f"Unknown config key: {key!r}")
        if value is None:
            continue
        try:
            updates[name] = parsers[name](value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad value for {key!r}: {value!r} ({e})") from e
    return replace(obj, **updates)


# ── config objects ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class FitConfig:
    """Settings for one TR-VBI run."""
    r_init: Optional[int] = None
    max_iters: int = MAX_ITERS
    tol: float = TOL
    prune_threshold: float = PRUNE_THRESHOLD
    prune_burn_in: int = PRUNE_BURN_IN
    prune_rule: str = "power"
    lambda_rate_factor: float = LAMBDA_RATE_FACTOR
    round_tol: float = ROUND_TOL
    seed: int = 0
    priors_a: float = PRIOR_A
    priors_b: float = PRIOR_B
    priors_c: float = PRIOR_C
    priors_d: float = PRIOR_D
    overwrite_observed: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.r_init is not None and self.r_init < 1:
            raise ConfigError(f"r_init must be >= 1, got {self.r_init}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        for name in ("priors_a", "priors_b", "priors_c", "priors_d"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        _prune_rule(self.prune_rule)
        if self.lambda_rate_factor <= 0:
            raise ConfigError(f"lambda_rate_factor must be > 0, got {self.lambda_rate_factor}")
        if not 0.0 <= self.round_tol < 1.0:
            raise ConfigError(f"round_tol must be in [0, 1), got {self.round_tol}")

    def resolved_r_init(self, dims: Sequence[int]) -> int:
        """User value, or min(R_INIT_CAP, smallest extent)."""
        if self.r_init is not None:
            return self.r_init
        return max(1, min(R_INIT_CAP, min(dims)))

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base: Optional["FitConfig"] = None) -> "FitConfig":
        return _apply(base or cls(), raw, _FIT_PARSERS)


_FIT_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "r_init": _optional_int,
    "max_iters": int,
    "tol": float,
    "prune_threshold": float,
    "prune_burn_in": int,
    "prune_rule": _prune_rule,
    "lambda_rate_factor": float,
    "round_tol": float,
    "seed": int,
    "priors_a": float,
    "priors_b": float,
    "priors_c": float,
    "priors_d": float,
    "overwrite_observed": parse_bool,
    "n_jobs": int,
}


@dataclass(frozen=True)
class ALSConfig:
    """Settings for one TR-ALS run. ``ranks`` broadcasts when it is an int."""
    ranks: Union[int, Tuple[int, ...]] = 2
    ridge: float = ALS_RIDGE
    max_iters: int = ALS_MAX_ITERS
    tol: float = ALS_TOL
    seed: int = 0
    overwrite_observed: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.ridge < 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if isinstance(out["ranks"], tuple):
            out["ranks"] = list(out["ranks"])
        return out

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base: Optional["ALSConfig"] = None) -> "ALSConfig":
        return _apply(base or cls(), raw, _ALS_PARSERS)


_ALS_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "ranks": parse_ranks,
    "ridge": float,
    "max_iters": int,
    "tol": float,
    "seed": int,
    "overwrite_observed": parse_bool,
    "n_jobs": int,
}
