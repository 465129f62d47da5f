"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 self-check failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import Config
from .formats import (DataError, RunManifest, read_json, read_tracklet, results_document,
                      sha256_file, tracklet_files, validate_results, write_json,
                      write_tracklet)
from .weights import WeightsError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFCHECK = 0, 1, 2, 3
DEFAULT_SIZES = (512, 1024, 2048, 4096, 8192)
BENCH_COLUMNS = ("n", "flops_ours", "flops_attn", "steps_per_sec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Config handling

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration")
    g.add_argument("--config", help="JSON file with Config fields")
    g.add_argument("--memory-size", type=int, help="frames kept in the memory bank")
    g.add_argument("--k", type=int, help="propagation neighbours per token")
    g.add_argument("--layers", type=int, help="Bi-SSM layers used")
    g.add_argument("--no-gfem", action="store_true", help="skip grouped feature enhancement")
    g.add_argument("--no-mask", action="store_true", help="drop the mask embedding from memory")
    g.add_argument("--no-geometry", action="store_true",
                   help="drop history features from memory (mask only)")
    g.add_argument("--scalar-softmax", action="store_true",
                   help="one neighbour weight per token instead of per channel")
    g.add_argument("--search-scale", type=float)
    g.add_argument("--search-margin", type=float)
    g.add_argument("--precision-cap", type=float)


def _resolve_config(args, base: Config | None = None) -> Config:
    cfg = base or Config()
    if args.config:
        try:
            cfg = Config.from_json(args.config)
        except OSError as e:
            raise DataError(f"{args.config}: {e.strerror}") from None
        except (ValueError, TypeError) as e:
            raise DataError(f"{args.config}: {e}") from None
    changes = {name: getattr(args, name) for name in
               ("memory_size", "k", "layers", "search_scale", "search_margin", "precision_cap")
               if getattr(args, name) is not None}
    if args.no_gfem:
        changes["use_gfem"] = False
    if args.no_mask:
        changes["use_mask"] = False
    if args.no_geometry:
        changes["use_geometry"] = False
    if args.scalar_softmax:
        changes["scalar_softmax"] = True
    try:
        return cfg.replace(**changes)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _manifest(command: str, argv, cfg: Config | None, seed=None, inputs=(), outputs=()):
    return RunManifest(command, list(argv), cfg.to_dict() if cfg else {}, seed,
                       {str(p): sha256_file(p) for p in inputs}, [str(o) for o in outputs],
                       __version__)


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args, argv) -> int:
    from .synthgen import ScenarioSpec, generate, preset, preset_suite

    if args.preset == "all":
        specs = list(preset_suite().values())
    elif args.preset:
        try:
            specs = [preset(args.preset)]
        except KeyError as e:
            raise UsageError(e.args[0]) from None
    else:
        try:
            specs = [ScenarioSpec.from_dict(read_json(args.spec))]
        except (ValueError, TypeError) as e:
            raise DataError(f"{args.spec}: {e}") from None
    if args.seed is not None:
        specs = [ScenarioSpec.from_dict(s.to_dict() | {"seed": args.seed}) for s in specs]
    out = Path(args.out)
    t0 = time.perf_counter()
    written = []
    try:
        for spec in specs:
            target = out / spec.name if len(specs) > 1 else out
            written += write_tracklet(target, generate(spec), spec.to_dict())
    except OSError as e:
        raise DataError(f"{e.filename}: {e.strerror}") from None
    inputs = [args.spec] if args.spec else []
    m = _manifest("synth", argv, None, args.seed, inputs,
                  [str(out / s.name) if len(specs) > 1 else str(out) for s in specs])
    write_json(out / "manifest.json", m.to_dict(with_timing=False))
    _log(f"wrote {len(written)} files for {len(specs)} tracklet(s) to {out} "
         f"in {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def cmd_init_weights(args, argv) -> int:
    from .weights import init_weights, save

    cfg = _resolve_config(args)
    inputs = [args.config] if args.config else []
    m = _manifest("init-weights", argv, cfg, args.seed, inputs, [args.out])
    try:
        data = save(args.out, init_weights(cfg, args.seed), cfg,
                    {"manifest": m.to_dict(with_timing=False)})
    except OSError as e:
        raise DataError(f"{args.out}: {e.strerror}") from None
    _log(f"wrote {len(data)} bytes to {args.out}")
    return EXIT_OK


def _load_model(args, cfg_args):
    """Weights and config for tracking, from a file or a seed."""
    from .weights import from_tensors, init_weights, load, to_tensors

    if args.weights:
        w, file_cfg, _ = load(args.weights)
        cfg = _resolve_config(cfg_args, file_cfg)
        if cfg.layers > file_cfg.layers:
            raise UsageError(f"--layers {cfg.layers} exceeds the {file_cfg.layers} "
                             f"layer(s) stored in {args.weights}")
        return from_tensors(to_tensors(w), cfg), cfg
    cfg = _resolve_config(cfg_args)
    return init_weights(cfg, args.seed), cfg


def _track_one(job):
    from .tracker import run_tracklet, subsample_htv

    data_dir, out_path, weights, cfg, interval, gt_replay, manifest = job
    t = subsample_htv(read_tracklet(data_dir), interval)
    t0 = time.perf_counter()
    res = run_tracklet(t, cfg, weights, gt_replay=gt_replay)
    elapsed = time.perf_counter() - t0
    doc = results_document(res, interval, gt_replay, cfg.precision_cap, manifest)
    validate_results(doc, str(out_path))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_json(out_path, doc)
    return str(out_path), res.success, res.precision, len(t), elapsed


def cmd_track(args, argv) -> int:
    if args.interval < 1:
        raise UsageError("--interval must be >= 1")
    weights, cfg = _load_model(args, args)
    workers = args.workers or int(os.environ.get("MT3D_THREADS", "1") or 1)
    if len(args.data) == 1:
        outs = [Path(args.out)]
    else:
        names = [Path(d).name for d in args.data]
        if len(set(names)) != len(names):
            raise UsageError("data directories must have distinct names")
        outs = [Path(args.out) / f"{n}.json" for n in names]
    jobs = []
    for d, o in zip(args.data, outs):
        inputs = tracklet_files(d) + ([args.weights] if args.weights else [])
        missing = [p for p in inputs if not Path(p).exists()]
        if missing:
            raise DataError(f"{missing[0]}: not found")
        seed = None if args.weights else args.seed
        m = _manifest("track", argv, cfg, seed, inputs, [o])
        jobs.append((d, o, weights, cfg, args.interval, args.gt_replay, m))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_track_one, jobs))
    else:
        done = [_track_one(j) for j in jobs]
    for path, s, p, n, elapsed in done:
        print(f"{path}: success {100 * s:.1f} precision {100 * p:.1f} "
              f"({n} frames, {n / elapsed:.1f} frames/s)")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .evalbench import Score, aggregate

    paths = sorted({p for pattern in args.results for p in glob.glob(pattern)})
    if not paths:
        raise DataError(f"no result files match {' '.join(args.results)}")
    scores = []
    for p in paths:
        doc = read_json(p)
        validate_results(doc, p)
        s = doc["summary"]
        scores.append(Score(doc["label"], s["success"], s["precision"], s["frames"]))
    table = aggregate(scores)
    print(table.to_text())
    if args.out:
        doc = table.to_dict() | {"files": paths,
                                 "manifest": _manifest("eval", argv, None, None, paths,
                                                       [args.out]).to_dict(with_timing=False)}
        write_json(args.out, doc)
    return EXIT_OK


def write_bench_csv(path, report) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in report.rows:
            w.writerow([r.n, r.flops_ours, r.flops_attn, repr(r.steps_per_sec)])


def read_bench_csv(path) -> list[tuple[int, int, int, float]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != BENCH_COLUMNS:
        raise DataError(f"{path}: unexpected header {rows[0] if rows else '(empty)'}")
    return [(int(a), int(b), int(c), float(d)) for a, b, c, d in rows[1:]]


def cmd_bench(args, argv) -> int:
    from .evalbench import run_bench

    sizes = args.sizes or list(DEFAULT_SIZES)
    if sizes != sorted(set(sizes)):
        raise UsageError("--sizes must be strictly ascending")
    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    cfg = _resolve_config(args)
    if sizes[0] < cfg.n_tokens:
        raise UsageError(f"sizes must be >= n_tokens ({cfg.n_tokens})")
    report = run_bench(cfg, sizes, args.reps, args.seed, args.threads)
    print(f"{'n':>6} {'flops_ours':>14} {'flops_attn':>16} {'steps/s':>9}")
    for r in report.rows:
        print(f"{r.n:>6} {r.flops_ours:>14} {r.flops_attn:>16} {r.steps_per_sec:>9.2f}")
    print(report.summary())
    if args.out:
        write_bench_csv(args.out, report)
        m = _manifest("bench", argv, cfg, args.seed, (), [args.out])
        m.timing = {str(r.n): r.seconds for r in report.rows}
        write_json(str(args.out) + ".manifest.json",
                   m.to_dict() | {"slopes": {"flops_ours": report.slope_ours,
                                             "flops_attn": report.slope_attn,
                                             "seconds": report.slope_time}})
    return EXIT_OK


def cmd_selfcheck(args, argv) -> int:
    from .selfcheck import CHECKS, format_results, run_all

    if args.inject_fault and args.inject_fault != "all" and args.inject_fault not in CHECKS:
        raise UsageError(f"unknown check {args.inject_fault!r}; choose from "
                         f"{', '.join(CHECKS)} or all")
    only = args.only.split(",") if args.only else None
    if only and set(only) - set(CHECKS):
        raise UsageError(f"unknown check(s): {', '.join(sorted(set(only) - set(CHECKS)))}")
    results = run_all(args.inject_fault, only)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def cmd_rerun(args, argv) -> int:
    """Re-execute the command recorded in a manifest after checking its inputs are unchanged."""
    src = Path(args.manifest)
    if src.suffix == ".mt3d":
        from .weights import load

        meta = load(src)[2]
        doc = meta.get("manifest")
        if doc is None:
            raise DataError(f"{src}: no run manifest stored")
    else:
        doc = read_json(src)
        doc = doc.get("manifest", doc) if isinstance(doc, dict) else doc
    m = RunManifest.from_dict(doc)
    for path, digest in m.inputs.items():
        if not Path(path).exists():
            raise DataError(f"{path}: input recorded in the manifest is missing")
        if sha256_file(path) != digest:
            raise DataError(f"{path}: contents changed since the recorded run")
    if not m.argv or m.argv[0] == "rerun":
        raise DataError(f"{src}: manifest holds no re-runnable command")
    _log(f"re-running: mt3d {' '.join(m.argv)}")
    return main(m.argv)


# ---------------------------------------------------------------------------

def _sizes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mt3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mt3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic tracklet")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="preset name, or 'all' for the whole suite")
    src.add_argument("--spec", help="JSON scenario file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.set_defaults(fn=cmd_synth)

    w = sub.add_parser("init-weights", help="write seeded initial weights")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    _add_config_flags(w)
    w.set_defaults(fn=cmd_init_weights)

    t = sub.add_parser("track", help="one-pass tracking of tracklet directories")
    t.add_argument("--data", nargs="+", required=True, help="tracklet directories")
    t.add_argument("--out", required=True,
                   help="result file (one tracklet) or directory (several)")
    t.add_argument("--weights", help="weights file; otherwise --seed initialises them")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--interval", type=int, default=1, help="keep every n-th frame")
    t.add_argument("--gt-replay", action="store_true",
                   help="replace predictions with ground truth (oracle upper bound)")
    t.add_argument("--workers", type=int, help="parallel tracklets (default: $MT3D_THREADS or 1)")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", help="aggregate result files per class")
    e.add_argument("results", nargs="+", help="result files or glob patterns")
    e.add_argument("--out", help="write the table as JSON")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="FLOPs and throughput versus input size")
    b.add_argument("--sizes", type=_sizes, help="ascending sizes, e.g. 512,1024,2048")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV output path")
    _add_config_flags(b)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("selfcheck", help="run the embedded oracle suite")
    c.add_argument("--inject-fault", nargs="?", const="zoh", metavar="CHECK",
                   help="corrupt one check (default zoh) or 'all'")
    c.add_argument("--only", help="comma-separated subset of checks")
    c.set_defaults(fn=cmd_selfcheck)

    r = sub.add_parser("rerun", help="repeat a run from its manifest")
    r.add_argument("manifest", help="manifest.json, a results file or a weights file")
    r.set_defaults(fn=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args, argv)
    except UsageError as e:
        _log(f"mt3d {args.command}: error: {e}")
        return EXIT_USAGE
    except (DataError, WeightsError) as e:
        _log(f"mt3d {args.command}: {e}")
        return EXIT_DATA
    except (ValueError, OSError) as e:
        _log(f"mt3d {args.command}: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
