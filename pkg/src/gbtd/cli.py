"""Command-line interface: ``gbtd synth | decompose | verify | count``.

Each command prints a canonical JSON report on stdout and a short summary
on stderr. Exit codes: 0 success, 1 verification failure, 2 bad input,
3 numerical failure. Modes and unit numbers are 1-based on the command line.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .archive import load_archive, save_decomposition, save_group, save_unit
from .archspec import (
    BUILTIN_NAMES,
    CountConvention,
    flop_count,
    load_spec,
    model_size_mb,
    param_count,
    stage_breakdown,
    without_sharing,
)
from .convmap import ConvKernel, FactoredConvUnit, direct_conv2d, factored_forward
from .cru import CollectiveGroup, collective_from_btd, forward_all, unit_kernel
from .decomp import AlsConfig, btd_als, random_btd, reconstruct
from .errors import AlsNumericalError
from .fileio import canonical_json, read_gbt, read_members, write_gbt
from .tensor import concat_mode, relative_error

VERIFY_TOL = 1e-5
_WILDCARDS = ("-", "*", "_", "none", "")


class UsageError(ValueError):
    pass


def _ints(text, what):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def parse_ranks(text, shape, modes=None):
    """Rank signature from ``--rank`` and ``--modes``.

    ``text`` lists one rank per mode (``-`` leaves a mode unfactorized), or
    one rank per entry of ``modes``, or a single rank applied to every
    factorized mode. ``modes`` is 1-based.
    """
    order = len(shape)
    if modes is not None:
        bad = [m for m in modes if not 1 <= m <= order]
        if bad or len(set(modes)) != len(modes):
            raise UsageError(f"--modes {modes} invalid for a tensor of order {order}")
    tokens = [t.strip().lower() for t in text.split(",")]
    try:
        values = [None if t in _WILDCARDS else int(t) for t in tokens]
    except ValueError:
        raise UsageError(f"--rank must list integers or '-', got {text!r}") from None
    targets = list(range(order)) if modes is None else [m - 1 for m in modes]
    if len(values) == order and modes is None:
        ranks = values
    elif len(values) == 1:
        ranks = [values[0] if n in targets else None for n in range(order)]
    elif len(values) == len(targets):
        ranks = [None] * order
        for n, v in zip(targets, values):
            ranks[n] = v
    else:
        raise UsageError(
            f"--rank gives {len(values)} values; expected 1, {len(targets)} or {order}"
        )
    if all(k is None for k in ranks) and modes is not None:
        raise UsageError("no mode is factorized")
    for n, (k, d) in enumerate(zip(ranks, shape), start=1):
        if k is not None and not 1 <= k <= d:
            raise UsageError(f"rank {k} for mode {n} must lie in 1..{d}")
    return tuple(ranks)


def _digest_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digest_archive(path):
    h = hashlib.sha256()
    for name, data in sorted(read_members(path).items()):
        h.update(name.encode() + b"\0" + hashlib.sha256(data).digest())
    return h.hexdigest()


def _als_config(args):
    return AlsConfig(max_sweeps=args.sweeps, tol=args.tol, seed=args.seed, ridge=args.ridge)


def _ranks_json(ranks):
    return [None if k is None else int(k) for k in ranks]


# --- commands -------------------------------------------------------------


def cmd_synth(args):
    shape = _ints(args.shape, "--shape")
    if any(d < 1 for d in shape):
        raise UsageError(f"--shape extents must be positive, got {shape}")
    modes = _ints(args.modes, "--modes") if args.modes else None
    ranks = parse_ranks(args.rank, shape, modes)
    if args.terms < 1:
        raise UsageError("--terms must be at least 1")
    d = random_btd(shape, args.terms, ranks, np.random.default_rng(args.seed))
    out = Path(args.out)
    truth = Path(args.truth) if args.truth else out.with_suffix(".truth")
    x = reconstruct(d)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gbt(out, x)
    save_decomposition(truth, d)
    report = {
        "command": "synth",
        "shape": shape,
        "R": args.terms,
        "ranks": _ranks_json(ranks),
        "seed": args.seed,
        "outputs": {
            "tensor": {"path": str(out), "sha256": _digest_file(out)},
            "truth": {"path": str(truth), "sha256": _digest_archive(truth)},
        },
        "norm": float(np.linalg.norm(x)),
    }
    summary = f"synth: wrote {out} {tuple(shape)} and ground truth {truth}"
    return 0, report, summary


def cmd_decompose(args):
    tensors = [read_gbt(p) for p in args.tensors]
    inputs = [{"path": p, "sha256": _digest_file(p)} for p in args.tensors]
    modes = _ints(args.modes, "--modes") if args.modes else None
    ranks = parse_ranks(args.rank, tensors[0].shape, modes)
    if args.terms < 1:
        raise UsageError("--terms must be at least 1")
    cfg = _als_config(args)
    conv_sig = len(ranks) == 4 and ranks[0] is None and ranks[1] is None and None not in ranks[2:]
    report = {
        "command": "decompose",
        "inputs": inputs,
        "R": args.terms,
        "ranks": _ranks_json(ranks),
        "als": {"max_sweeps": cfg.max_sweeps, "tol": cfg.tol, "ridge": cfg.ridge, "seed": cfg.seed},
        "archive": str(args.out),
    }
    if len(tensors) > 1:
        if not conv_sig:
            raise UsageError("several tensors need 4th-order kernels with --modes 3,4")
        for p, t in zip(args.tensors, tensors):
            if t.shape != tensors[0].shape:
                raise UsageError(f"{p} has shape {t.shape}, expected {tensors[0].shape}")
        for t in tensors:
            ConvKernel(t)  # odd spatial extents
        d, trace = btd_als(concat_mode(tensors, 3), args.terms, ranks, cfg)
        save_group(args.out, collective_from_btd(d, len(tensors)), trace)
        kind = "collective_group"
        report["L"] = len(tensors)
    else:
        x = tensors[0]
        if conv_sig:
            ConvKernel(x)  # odd spatial extents
        d, trace = btd_als(x, args.terms, ranks, cfg)
        if conv_sig:
            save_unit(args.out, FactoredConvUnit.from_btd(d), trace)
            kind = "factored_conv_unit"
        else:
            save_decomposition(args.out, d, trace)
            kind = "btd"
    report.update(
        kind=kind,
        relative_error=trace[-1],
        error_trace=[float(e) for e in trace],
        sweeps=len(trace),
        stored_numbers=_stored(args.out),
    )
    summary = f"decompose: {kind}, {len(trace)} sweeps, relative error {trace[-1]:.3e} -> {args.out}"
    return 0, report, summary


def _stored(path):
    return sum((len(v) - 8) // 8 - _order(v) for k, v in read_members(path).items() if k.endswith(".gbt"))


def _order(buf):
    return int.from_bytes(buf[4:8], "little")


def cmd_verify(args):
    obj, meta = load_archive(args.archive)
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    if args.size < 1:
        raise UsageError("--size must be at least 1")
    seeds = np.random.SeedSequence(args.seed).spawn(args.trials)
    if isinstance(obj, FactoredConvUnit):
        if not (obj.act1.is_identity and obj.act2.is_identity):
            raise UsageError("verification needs identity activations")
        kernels = [obj.composed_kernel()]
        run = lambda x: [factored_forward(x, obj)]
        d3 = obj.in_channels
    elif isinstance(obj, CollectiveGroup):
        kernels = [unit_kernel(obj, l) for l in range(obj.L)]
        run = lambda x: forward_all(obj, x)
        d3 = np.shape(obj.a3[0])[0]
    else:
        raise UsageError(f"{args.archive} holds a plain decomposition, not a convolution")
    per_unit = [0.0] * len(kernels)
    trials = []
    for s in seeds:
        x = np.random.default_rng(s).uniform(-1, 1, (args.size, args.size, d3))
        errs = []
        for l, (k, out) in enumerate(zip(kernels, run(x))):
            ref = direct_conv2d(x, k)
            e = 0.0 if not ref.any() and not out.any() else relative_error(out, ref)
            errs.append(e)
            per_unit[l] = max(per_unit[l], e)
        trials.append(errs)
    worst = max(per_unit)
    passed = worst <= VERIFY_TOL
    report = {
        "command": "verify",
        "archive": {"path": str(args.archive), "sha256": _digest_archive(args.archive)},
        "kind": meta.get("kind"),
        "trials": args.trials,
        "seed": args.seed,
        "size": args.size,
        "tolerance": VERIFY_TOL,
        "max_relative_error": worst,
        "unit_max_relative_error": per_unit,
        "trial_errors": trials,
        "result": "PASS" if passed else "FAIL",
    }
    summary = f"verify: {report['result']} max relative error {worst:.3e} over {args.trials} trials"
    return (0 if passed else 1), report, summary


def cmd_count(args):
    try:
        spec = load_spec(args.arch)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    conv = CountConvention(flops=args.convention, input_size=args.input_size)
    if args.no_sharing:
        spec = without_sharing(spec)
    params = param_count(spec, conv)
    report = {
        "command": "count",
        "arch": spec.name,
        "depth": spec.depth,
        "sharing": not args.no_sharing,
        "convention": conv.to_dict(),
        "params": params,
        "flops": flop_count(spec, conv),
        "model_size_mb": model_size_mb(spec, conv),
        "stages": stage_breakdown(spec, conv),
    }
    summary = (
        f"count: {spec.name}: {params / 1e6:.2f}M params, "
        f"{report['flops'] / 1e9:.2f} GFLOPs ({conv.flops}), {report['model_size_mb']} MB"
    )
    return 0, report, summary


# --- entry point ----------------------------------------------------------


def _add_als(p):
    p.add_argument("--terms", "-R", type=int, default=1, help="number of Tucker terms R")
    p.add_argument("--rank", required=True, help="ranks per mode, '-' for unfactorized")
    p.add_argument("--modes", help="1-based factorized modes, e.g. 3,4")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="gbtd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--timing", action="store_true", help="add wall time to the report")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a tensor built from a random BTD")
    p.add_argument("--shape", required=True, help="extents, e.g. 6,6,6")
    _add_als(p)
    p.add_argument("--out", "-o", required=True, help="tensor file (.gbt)")
    p.add_argument("--truth", help="ground-truth archive (default: OUT with .truth suffix)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", help="fit a BTD; several kernels give a collective group")
    p.add_argument("tensors", nargs="+", help="GBT1 tensor files")
    _add_als(p)
    p.add_argument("--sweeps", type=int, default=AlsConfig.max_sweeps)
    p.add_argument("--tol", type=float, default=AlsConfig.tol)
    p.add_argument("--ridge", type=float, default=AlsConfig.ridge)
    p.add_argument("--out", "-o", required=True, help="archive directory or .zip")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("verify", help="check a factored archive against direct convolution")
    p.add_argument("archive")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8, help="side of the random input maps")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", help="parameters, FLOPs and model size of an architecture")
    p.add_argument("arch", help=f"builtin name ({', '.join(BUILTIN_NAMES)}) or JSON file")
    p.add_argument("--convention", choices=("fma", "madd2"), default="fma")
    p.add_argument("--no-sharing", action="store_true", help="count CRU stages unshared")
    p.add_argument("--input-size", type=int, default=224)
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code, report, summary = args.func(args)
    except AlsNumericalError as exc:
        if exc.mode is not None and exc.term is not None:
            msg = f"singular normal equations for mode {exc.mode + 1}, term {exc.term + 1}; use a positive --ridge"
        else:
            msg = str(exc)
        print(f"gbtd {args.command}: numerical failure: {msg}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError, IndexError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gbtd {args.command}: error: {msg}", file=sys.stderr)
        return 2
    if args.timing:
        report["wall_time_s"] = time.perf_counter() - start
    sys.stdout.buffer.write(canonical_json(report))
    sys.stdout.flush()
    print(summary, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
