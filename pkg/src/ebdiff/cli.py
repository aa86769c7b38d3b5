"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import ExperimentConfig, load_config
from .datasets import DATASETS, generate_dataset, read_points, write_points
from .diffusion import build_schedule, ddim_sample
from .earlybird import DistanceMatrix, export_distance_matrix
from .evaluation import measure_speedup, metric_report, weighted_cost
from .pruning import load_mask
from .seeding import stream

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="ebdiff", description="Early-bird ticket lab for toy diffusion models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="experiment config (JSON)")
            sp.add_argument("--seed", type=int, help="override global_seed")
        sp.add_argument("--json", action="store_true", help="print results as JSON")

    g = sub.add_parser("gen-data", help="write a toy dataset as CSV")
    common(g)
    g.add_argument("--dataset", choices=DATASETS)
    g.add_argument("--n", type=int)
    g.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("run", help="run an experiment pipeline")
    common(r)
    r.add_argument("--mode", choices=("dense", "scratch", "eb", "taeb"), required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--baseline", type=Path, help="finished dense run to measure speed-up against")
    r.add_argument("--workers", type=int, help="process count for region searches/trainers")

    s = sub.add_parser("sample", help="draw DDIM samples from a finished run")
    s.add_argument("--run", type=Path, required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--json", action="store_true")

    e = sub.add_parser("evaluate", help="compare two point-set CSVs")
    e.add_argument("--generated", type=Path, required=True)
    e.add_argument("--reference", type=Path, required=True)
    e.add_argument("--projections", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", action="store_true")

    d = sub.add_parser("distances", help="pairwise Hamming distances between mask files")
    d.add_argument("--masks", type=Path, nargs="+", required=True)
    d.add_argument("--out", type=Path, help="export stem for .csv/.pgm/.meta")
    d.add_argument("--detected-at", type=int)
    d.add_argument("--json", action="store_true")

    rep = sub.add_parser("report", help="summarize a run, optionally against a dense baseline")
    rep.add_argument("--run", type=Path, required=True)
    rep.add_argument("--baseline", type=Path)
    rep.add_argument("--json", action="store_true")
    return p


def _config(args):
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = load_config(args.config)
        except ValidationError as exc:
            raise UsageError(f"invalid config {args.config}:\n{exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"global_seed": args.seed})
        cfg = ExperimentConfig.model_validate(cfg.model_dump())
    return cfg


def _emit(args, payload, text=None):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen_data(args):
    cfg = _config(args)
    name = args.dataset or cfg.dataset.name
    n = args.n or cfg.dataset.n_train
    seed = cfg.dataset.seed if args.seed is None else args.seed
    batch = generate_dataset(name, n, seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_points(batch.points, args.out)
    _emit(args, {"dataset": name, "n": n, "seed": seed, "path": str(args.out)},
          f"wrote {n} {name} points to {args.out}")


def cmd_run(args):
    from .pipeline import run_pipeline

    cfg = _config(args)
    if args.baseline is not None and not (args.baseline / "reports" / "timing.json").is_file():
        raise UsageError(f"baseline run has no timing report: {args.baseline}")
    out = run_pipeline(cfg, args.mode, args.out, workers=args.workers, baseline=args.baseline)
    manifest = json.loads((out / "manifest.json").read_text())
    metrics = json.loads((out / "reports" / "metrics.json").read_text())
    payload = {"run_dir": str(out), "mode": args.mode, "config_hash": manifest["config_hash"],
               "tickets": manifest["tickets"], **metrics}
    _emit(args, payload, f"{args.mode} run written to {out} "
                         f"(energy distance {metrics['energy_distance']:.4f})")


def cmd_sample(args):
    from .pipeline import load_run_model, sampling_route

    if not (args.run / "manifest.json").is_file():
        raise UsageError(f"not a run directory: {args.run}")
    plan, nets, cfg = load_run_model(args.run)
    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    n = args.n or cfg.sampling.n_samples
    steps = args.steps or cfg.sampling.ddim_steps
    pts = ddim_sample(sampling_route(plan, nets), sched, steps, n, stream(args.seed, "sample", 0))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_points(pts, args.out)
    _emit(args, {"path": str(args.out), "n": n, "ddim_steps": steps},
          f"wrote {n} samples to {args.out}")


def cmd_evaluate(args):
    for p in (args.generated, args.reference):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
    gen = read_points(args.generated)
    ref = read_points(args.reference)
    report = metric_report(gen, ref, args.seed, args.projections)
    _emit(args, report.to_dict())


def cmd_distances(args):
    masks = []
    for p in args.masks:
        if not p.is_file():
            raise UsageError(f"mask file not found: {p}")
        masks.append(load_mask(p))
    m = DistanceMatrix.from_masks(masks, args.detected_at)
    m.check()
    if args.out is not None:
        export_distance_matrix(m, args.out)
    _emit(args, {"n": m.n, "matrix": np.round(m.d, 6).tolist(), "detected_at": m.detected_at},
          "\n".join(",".join(f"{v:.6f}" for v in row) for row in m.d))


def cmd_report(args):
    from .pipeline import load_run_model, read_timing

    if not (args.run / "manifest.json").is_file():
        raise UsageError(f"not a run directory: {args.run}")
    plan, nets, _ = load_run_model(args.run)
    avg_macs, avg_params = weighted_cost(plan, nets)
    metrics = json.loads((args.run / "reports" / "metrics.json").read_text())
    payload = {"energy_distance": metrics["energy_distance"],
               "sliced_wasserstein": metrics["sliced_wasserstein"],
               "avg_macs": avg_macs, "avg_params": avg_params, "speedup": None}
    if args.baseline is not None:
        if not (args.baseline / "reports" / "timing.json").is_file():
            raise UsageError(f"baseline run has no timing report: {args.baseline}")
        speed = measure_speedup(read_timing(args.baseline), read_timing(args.run))
        payload.update(speed.to_dict())
    _emit(args, payload)


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "distances": cmd_distances, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ebdiff: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"ebdiff: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
