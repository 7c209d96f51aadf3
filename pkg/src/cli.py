"""Command-line entry point: synth, complete, bench and info.

Exit codes: 0 success, 1 usage or configuration error, 2 data or numerical
failure. Diagnostics go to stderr; ``info`` prints to stdout.
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

import numpy as np

from src.baselines import tr_als_fit
from src.bench import SweepSpec, gen_synthetic, parse_snr, psnr, rse, run_sweep, sample_mask, summarize
from src.config import ALSConfig, FitConfig, load_config_file, parse_int_list, parse_ranks
from src.data_loader import (
    checkpoint_nbytes,
    detensorize,
    load_image,
    load_image_stack,
    preset_shape,
    read_dtf,
    read_header,
    read_mask,
    save_checkpoint,
    save_image,
    tensorize,
    write_dtf,
    write_mask,
)
from src.errors import ConfigError, ShapeError, TRError
from src.models import state_nbytes
from src.tensor import IndexSet, expected_inner_product, tr_reconstruct
from src.vbi import complete, fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trvbi", description="Tensor-ring completion with automatic rank determination")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    synth = sub.add_parser("synth", help="generate a synthetic TR tensor, a noisy copy and a mask")
    synth.add_argument("--dims", required=True, help="comma-separated extents, e.g. 10,10,10,10")
    synth.add_argument("--ranks", default="3", help="bond rank(s), one value or one per mode")
    synth.add_argument("--snr", default="none", help="noise SNR in dB, or 'none'")
    synth.add_argument("--mr", type=float, default=0.0, help="missing ratio in [0, 1)")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out-dir", required=True)

    comp = sub.add_parser("complete", help="complete a partially observed tensor or image")
    source = comp.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help=".dtf tensor or image file")
    source.add_argument("--stack", nargs="+", help="grayscale images completed as one H x W x K stack")
    comp.add_argument("--stack-size", default="32,32", help="width,height each stacked image is resized to")
    comp.add_argument("--mask", help=".msk file; sampled from --mr when omitted")
    comp.add_argument("--mr", type=float, help="missing ratio used when no mask is given")
    comp.add_argument("--truth", help="reference tensor for RSE/PSNR")
    comp.add_argument("--method", choices=("tr-vbi", "tr-als"), default="tr-vbi")
    comp.add_argument("--config", help="key=value file for the method's settings")
    comp.add_argument("--r-init", help="initial rank for tr-vbi")
    comp.add_argument("--ranks", help="fixed rank(s) for tr-als")
    comp.add_argument("--max-iters", type=int)
    comp.add_argument("--seed", type=int)
    comp.add_argument("--n-jobs", type=int)
    comp.add_argument("--preset", help="named image tensorization")
    comp.add_argument("--tensorize", help="comma-separated target shape for tensorization")
    comp.add_argument("--output", help="where to write the completed tensor (.dtf or image)")
    comp.add_argument("--report", help="where to write the JSON report (stdout when omitted)")
    comp.add_argument("--checkpoint", help="directory for the fitted TR-VBI state")

    bench = sub.add_parser("bench", help="run a sweep described by a spec file")
    bench.add_argument("--spec", required=True)
    bench.add_argument("--out", required=True, help="CSV with one row per run")
    bench.add_argument("--summary", help="CSV with per-cell aggregates")
    bench.add_argument("--n-jobs", type=int)

    info = sub.add_parser("info", help="print the header of DTF/MSK files")
    info.add_argument("files", nargs="+")
    return parser


# ── synth ────────────────────────────────────────────────────────────────


def cmd_synth(args) -> int:
    dims = parse_int_list(args.dims)
    ranks = parse_ranks(args.ranks)
    clean, noisy, _ = gen_synthetic(dims, ranks, parse_snr(args.snr), args.seed)
    mask = sample_mask(dims, args.mr, args.seed + 1)
    os.makedirs(args.out_dir, exist_ok=True)
    write_dtf(clean, os.path.join(args.out_dir, "clean.dtf"))
    write_dtf(noisy, os.path.join(args.out_dir, "noisy.dtf"))
    write_mask(mask, os.path.join(args.out_dir, "mask.msk"))
    logger.info("Wrote %s tensor with %d observed entries to %s", "x".join(map(str, dims)), len(mask), args.out_dir)
    return EXIT_OK


# ── complete ─────────────────────────────────────────────────────────────


def _is_dtf(path: str) -> bool:
    return path.lower().endswith(".dtf")


def _load_any(path: str) -> np.ndarray:
    return read_dtf(path) if _is_dtf(path) else load_image(path)


def _target_shape(args) -> Optional[Tuple[int, ...]]:
    if args.preset and args.tensorize:
        raise UsageError("--preset and --tensorize are mutually exclusive")
    if args.preset:
        return preset_shape(args.preset)[1]
    if args.tensorize:
        return parse_int_list(args.tensorize)
    return None


def _is_image_input(args) -> bool:
    return bool(args.stack) or not _is_dtf(args.input)


def _load_source(args) -> np.ndarray:
    if args.stack:
        size = parse_int_list(args.stack_size)
        if len(size) != 2:
            raise UsageError(f"--stack-size needs width,height, got {args.stack_size!r}")
        return load_image_stack(args.stack, (size[0], size[1]))
    return _load_any(args.input)


def _load_problem(args) -> Tuple[np.ndarray, IndexSet, Optional[np.ndarray], Tuple[int, ...], Optional[Tuple[int, ...]]]:
    """Observed tensor, mask, optional truth, original shape and working shape."""
    t = _load_source(args)
    truth = _load_any(args.truth) if args.truth else None
    if truth is None and _is_image_input(args):
        truth = t
    original = t.shape

    if args.mask:
        mask = read_mask(args.mask)
    elif args.mr is not None:
        mask = sample_mask(original, args.mr, (args.seed or 0) + 1)
    else:
        mask = IndexSet.full(original)
    if mask.shape != original:
        raise ShapeError(f"Mask shape {mask.shape} does not match input shape {original}")

    target = _target_shape(args)
    if target is not None:
        t = tensorize(t, target)
        mask = IndexSet(target, mask.linear)
        if truth is not None:
            truth = tensorize(truth, target)
    return t, mask, truth, original, target


def _file_config(args) -> Dict[str, str]:
    return load_config_file(args.config) if args.config else {}


def _fit_config(args) -> FitConfig:
    config = FitConfig.from_mapping(_file_config(args))
    overrides: Dict[str, Any] = {
        "r_init": args.r_init, "max_iters": args.max_iters, "seed": args.seed, "n_jobs": args.n_jobs,
    }
    return FitConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, base=config)


def _als_config(args) -> ALSConfig:
    config = ALSConfig.from_mapping(_file_config(args))
    overrides: Dict[str, Any] = {
        "ranks": args.ranks, "max_iters": args.max_iters, "seed": args.seed, "n_jobs": args.n_jobs,
    }
    return ALSConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, base=config)


def run_complete(args) -> Tuple[np.ndarray, Dict[str, Any]]:
    t, mask, truth, original, target = _load_problem(args)
    start = time.perf_counter()
    if args.method == "tr-vbi":
        config = _fit_config(args)
        state, trace = fit(t, mask, config)
        x_hat = complete(state, config.overwrite_observed)
        report: Dict[str, Any] = {
            "method": args.method,
            "config": config.to_dict(),
            "ranks_inferred": list(state.bonds),
            "iters": len(trace),
            "trace": [r.to_dict() for r in trace],
            "state_bytes": state_nbytes(state),
            "expected_sq_norm": expected_inner_product(state.cores.mean, state.cores.cov),
        }
        if args.checkpoint:
            save_checkpoint(state, args.checkpoint)
            report["checkpoint_bytes"] = checkpoint_nbytes(args.checkpoint)
    else:
        config = _als_config(args)
        rmses: List[float] = []
        cores = tr_als_fit(t, mask, config.ranks, config, rmses)
        x_hat = tr_reconstruct(cores)
        if config.overwrite_observed:
            x_hat = mask.restore(x_hat, t)
        report = {
            "method": args.method,
            "config": config.to_dict(),
            "ranks_inferred": list(cores.bonds),
            "iters": len(rmses),
            "trace": [{"iter": i, "obs_rmse": r} for i, r in enumerate(rmses, 1)],
        }
    report["wall_s"] = time.perf_counter() - start

    if truth is not None:
        report["rse"] = rse(x_hat, truth)
        peak = 1.0 if _is_image_input(args) else float(np.abs(truth).max())
        report["psnr"] = psnr(x_hat, truth, peak)
    if target is not None:
        x_hat = detensorize(x_hat, original)
    return x_hat, report


def cmd_complete(args) -> int:
    if args.stack and args.output and not _is_dtf(args.output):
        raise UsageError("a completed image stack can only be written as .dtf")
    x_hat, report = run_complete(args)
    if args.output:
        if _is_dtf(args.output):
            write_dtf(x_hat, args.output)
        else:
            save_image(x_hat, args.output)
        logger.info("Wrote completed tensor to %s", args.output)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ── bench / info ─────────────────────────────────────────────────────────


def cmd_bench(args) -> int:
    spec = SweepSpec.from_file(args.spec)
    if args.n_jobs is not None:
        spec.n_jobs = args.n_jobs
    records = run_sweep(spec, args.out)
    if args.summary:
        summarize(records).to_csv(args.summary, index=False)
    failed = sum(1 for r in records if r.error)
    if failed:
        print(f"warning: {failed} of {len(records)} runs failed; see the error column", file=sys.stderr)
    return EXIT_OK


def cmd_info(args) -> int:
    for path in args.files:
        magic, dims = read_header(path)
        print(f"{path}: {magic} order={len(dims)} dims={'x'.join(map(str, dims))}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "complete": cmd_complete, "bench": cmd_bench, "info": cmd_info}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TRError, OSError, np.linalg.LinAlgError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
