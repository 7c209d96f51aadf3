"""File I/O: DTF tensors, MSK masks, PNG images, tensorization and checkpoints.

DTF layout: one ASCII header line ``DTF1 <N> <I_1> ... <I_N>`` followed by
little-endian float64 values, first index fastest. MSK files use the
``MSK1`` magic and one byte (0/1) per entry in the same order.
"""

import json
import logging
import os
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.config import IMAGE_PRESETS, PIXEL_MAX
from src.errors import FormatError, ShapeError
from src.models import CorePosterior, Hyperpriors, LambdaPosterior, ModelState, TauPosterior
from src.tensor import IndexSet, TRCores, ten, vec

logger = logging.getLogger(__name__)

DTF_MAGIC = "DTF1"
MSK_MAGIC = "MSK1"
STATE_FILE = "state.json"


# ── DTF / MSK ────────────────────────────────────────────────────────────


def _header(magic: str, shape: Sequence[int]) -> bytes:
    return (" ".join([magic, str(len(shape))] + [str(int(d)) for d in shape]) + "\n").encode("ascii")


def read_header(path: str) -> Tuple[str, Tuple[int, ...]]:
    """Magic and dims of a DTF or MSK file, without reading the payload."""
    with open(path, "rb") as f:
        return _parse_header(f.readline(), path)


def _parse_header(line: bytes, path: str) -> Tuple[str, Tuple[int, ...]]:
    try:
        parts = line.decode("ascii").split()
        magic, order = parts[0], int(parts[1])
        dims = tuple(int(p) for p in parts[2:])
    except (UnicodeDecodeError, IndexError, ValueError) as e:
        raise FormatError(f"{path}: malformed header {line[:80]!r}") from e
    if magic not in (DTF_MAGIC, MSK_MAGIC):
        raise FormatError(f"{path}: unknown magic {magic!r}")
    if len(dims) != order or any(d < 1 for d in dims):
        raise FormatError(f"{path}: header declares order {order} but dims {dims}")
    return magic, dims


def _read_payload(path: str, magic: str, dtype: str) -> Tuple[Tuple[int, ...], np.ndarray]:
    with open(path, "rb") as f:
        found, dims = _parse_header(f.readline(), path)
        payload = f.read()
    if found != magic:
        raise FormatError(f"{path}: expected {magic}, found {found}")
    data = np.frombuffer(payload, dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: {data.size} values for dims {dims}")
    return dims, data


def write_dtf(t: np.ndarray, path: str) -> None:
    t = np.asarray(t, dtype=np.float64)
    if not np.isfinite(t).all():
        raise FormatError(f"{path}: refusing to write non-finite values")
    with open(path, "wb") as f:
        f.write(_header(DTF_MAGIC, t.shape))
        f.write(vec(t).astype("<f8").tobytes())


def read_dtf(path: str) -> np.ndarray:
    dims, data = _read_payload(path, DTF_MAGIC, "<f8")
    return ten(data.astype(np.float64), dims)


def write_mask(mask: IndexSet, path: str) -> None:
    with open(path, "wb") as f:
        f.write(_header(MSK_MAGIC, mask.shape))
        f.write(vec(mask.to_mask()).astype(np.uint8).tobytes())


def read_mask(path: str) -> IndexSet:
    dims, data = _read_payload(path, MSK_MAGIC, np.uint8)
    if (data > 1).any():
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    return IndexSet(dims, np.flatnonzero(data))


# ── images ───────────────────────────────────────────────────────────────


def load_image(path: str) -> np.ndarray:
    """8-bit image as an H x W x 3 tensor scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"Cannot read image {path}: {e}") from e
    logger.info("Loaded image %s with shape %s", path, rgb.shape)
    return rgb / PIXEL_MAX


def save_image(t: np.ndarray, path: str) -> None:
    """Clamp to [0, 1], quantize to 8 bits and write (RGB or grayscale)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 3 and t.shape[2] == 1:
        t = t[:, :, 0]
    if not (t.ndim == 2 or (t.ndim == 3 and t.shape[2] == 3)):
        raise ShapeError(f"Cannot save tensor of shape {t.shape} as an image")
    pixels = np.rint(np.clip(t, 0.0, 1.0) * PIXEL_MAX).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def load_image_stack(paths: Sequence[str], size: Tuple[int, int]) -> np.ndarray:
    """Grayscale images resized to ``size`` (width, height), stacked as H x W x K."""
    if not paths:
        raise FormatError("Empty image stack")
    frames: List[np.ndarray] = []
    for path in paths:
        try:
            with Image.open(path) as img:
                small = img.convert("L").resize(size, Image.Resampling.BILINEAR)
                frames.append(np.asarray(small, dtype=np.float64) / PIXEL_MAX)
        except (UnidentifiedImageError, OSError) as e:
            raise FormatError(f"Cannot read image {path}: {e}") from e
    logger.info("Loaded %d frames at %dx%d", len(frames), size[0], size[1])
    return np.stack(frames, axis=2)


def tensorize(t: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """Reshape to a higher order keeping the first-index-fastest element order."""
    target = tuple(int(d) for d in target_shape)
    if int(np.prod(target)) != np.size(t):
        raise ShapeError(f"Cannot tensorize {np.shape(t)} into {target}: element counts differ")
    return ten(vec(t), target)


def detensorize(x: np.ndarray, original_shape: Sequence[int]) -> np.ndarray:
    return tensorize(x, original_shape)


def preset_shape(name: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """(image shape, tensorized shape) for a named preset."""
    try:
        return IMAGE_PRESETS[name]
    except KeyError:
        raise ShapeError(f"Unknown tensorization preset {name!r}; choose from {sorted(IMAGE_PRESETS)}") from None


# ── checkpoints ──────────────────────────────────────────────────────────


def save_checkpoint(state: ModelState, directory: str, include_cov: bool = True) -> None:
    """Write mean cores (and slice covariances) as DTF plus a JSON sidecar."""
    os.makedirs(directory, exist_ok=True)
    for k, core in enumerate(state.cores.mean.cores):
        write_dtf(core, os.path.join(directory, f"core_{k}.dtf"))
        if include_cov:
            write_dtf(state.cores.cov[k], os.path.join(directory, f"cov_{k}.dtf"))
    sidecar = {
        "dims": list(state.dims),
        "ranks": list(state.bonds),
        "iteration": state.iteration,
        "seed": state.seed,
        "tau": {"shape": state.tau.shape, "rate": state.tau.rate},
        "lambda": {
            "shape": [s.tolist() for s in state.lambdas.shape],
            "rate": [r.tolist() for r in state.lambdas.rate],
        },
        "priors": {
            "a": state.priors.a,
            "b": state.priors.b,
            "c": [c.tolist() for c in state.priors.c],
            "d": [d.tolist() for d in state.priors.d],
        },
        "has_cov": include_cov,
    }
    with open(os.path.join(directory, STATE_FILE), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    logger.info("Saved checkpoint with ranks %s to %s", sidecar["ranks"], directory)


def load_checkpoint(directory: str, t: np.ndarray, mask: IndexSet) -> ModelState:
    """Rebuild a ModelState; observations and mask come from the caller."""
    path = os.path.join(directory, STATE_FILE)
    try:
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"Cannot read checkpoint {path}: {e}") from e

    order = len(meta["dims"])
    cores = TRCores([read_dtf(os.path.join(directory, f"core_{k}.dtf")) for k in range(order)])
    if meta.get("has_cov", True):
        cov = [read_dtf(os.path.join(directory, f"cov_{k}.dtf")) for k in range(order)]
    else:
        cov = [
            np.broadcast_to(np.eye(c.shape[0] * c.shape[2]), (c.shape[1],) + (c.shape[0] * c.shape[2],) * 2).copy()
            for c in cores.cores
        ]
    priors = meta["priors"]
    state = ModelState(
        cores=CorePosterior(cores, cov),
        lambdas=LambdaPosterior(
            [np.asarray(s) for s in meta["lambda"]["shape"]],
            [np.asarray(r) for r in meta["lambda"]["rate"]],
        ),
        tau=TauPosterior(meta["tau"]["shape"], meta["tau"]["rate"]),
        priors=Hyperpriors(priors["a"], priors["b"], priors["c"], priors["d"]),
        mask=mask,
        observations=np.asarray(t, dtype=np.float64),
        seed=meta["seed"],
        iteration=meta["iteration"],
    )
    state.check_consistency()
    return state


def checkpoint_nbytes(directory: str) -> int:
    """Total bytes on disk of a checkpoint directory."""
    return sum(
        os.path.getsize(os.path.join(directory, name))
        for name in os.listdir(directory)
        if os.path.isfile(os.path.join(directory, name))
    )
