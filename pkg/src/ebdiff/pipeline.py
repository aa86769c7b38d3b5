"""End-to-end runs: dense, scratch, eb and taeb.

Run directory layout::

    manifest.json  config.json
    checkpoints/   dense.ebdf | scratch.ebdf | region_<i>.ebdf
    masks/         scratch.ebmask | region_<i>/ticket.ebmask
    heatmaps/      region_<i>/hamming.{csv,pgm,meta}
    samples/       generated.csv  reference.csv
    reports/       metrics.json  cost.json  timing.json  speedup.json

Plain EB is run as the single-region plan, so an eb run and a one-region taeb
run with the same config write identical files. Only ``reports/timing.json``
and ``reports/speedup.json`` hold wall-clock values; everything else is a
deterministic function of the config.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import save_config
from .datasets import generate_dataset, read_points, write_points
from .diffusion import build_schedule, ddim_sample, train, train_step
from .earlybird import export_distance_matrix
from .evaluation import RunTiming, measure_speedup, metric_report, weighted_cost
from .nn import AdamState, Denoiser
from .pruning import compact, extract_mask, save_mask, score_channels
from .seeding import derive_seed, stream
from .taeb import EnsembleModel, find_taeb_tickets, train_regions_parallel, weighted_avg_rate

log = logging.getLogger(__name__)

MODES = ("dense", "scratch", "eb", "taeb")
TIMING_FILES = ("reports/timing.json", "reports/speedup.json")
MANIFEST_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Run:
    def __init__(self, cfg, mode, out, workers):
        self.cfg = cfg
        self.mode = mode
        self.out = Path(out)
        self.workers = workers
        self.stages = []
        self.tickets = []
        self.seed = cfg.global_seed
        self.chash = cfg.config_hash()

    def stage(self, name, fn, *args):
        try:
            result = fn(*args)
        except Exception as exc:
            self.stages.append({"name": name, "status": "failed", "error": repr(exc)})
            raise StageError(name, exc) from exc
        self.stages.append({"name": name, "status": "ok"})
        return result

    def path(self, rel):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def run_pipeline(cfg, mode, out, workers=None, baseline=None):
    """Execute one experiment mode and write its run directory.

    ``baseline`` is an optional path to a finished dense run; when given, the
    speed-up report is computed against its timing.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    run = _Run(cfg, mode, out, workers)
    run.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run.path("config.json"))
    try:
        data, heldout = run.stage("data", _make_data, cfg)
        sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
        runner = {"dense": _run_dense, "scratch": _run_scratch, "eb": _run_eb,
                  "taeb": _run_taeb}[mode]
        plan, nets, timing = runner(run, data, sched)
        run.stage("sample", _sample_and_score, run, plan, nets, sched, heldout)
        run.stage("report", _reports, run, plan, nets, timing, baseline)
    finally:
        _write_manifest(run)
    return run.out


def _make_data(cfg):
    d = cfg.dataset
    train_set = generate_dataset(d.name, d.n_train, d.seed)
    heldout = generate_dataset(d.name, d.n_eval, derive_seed(d.seed, "heldout"))
    return train_set, heldout


def _save_net(run, rel, net, rng_state, mask=None):
    save_checkpoint(Checkpoint.from_net(net, run.chash, rng_state, mask), run.path(rel))


def _run_dense(run, data, sched):
    cfg = run.cfg

    def go():
        net = Denoiser.init(stream(run.seed, "init", 0), **cfg.model_kwargs())
        opt = AdamState.for_params(net.params(), lr=cfg.training.learning_rate)
        rng = stream(run.seed, "train", 0)
        started = time.perf_counter()
        train(net, opt, data.points, sched, rng, cfg.training.iterations, None,
              cfg.training.batch_size)
        return net, rng, time.perf_counter() - started

    net, rng, wall = run.stage("train", go)
    _save_net(run, "checkpoints/dense.ebdf", net, rng.bit_generator.state)
    return cfg.eb_plan(), [net], RunTiming("dense", wall)


def _run_scratch(run, data, sched):
    """Prune a fully trained dense net, re-initialize the survivors, retrain."""
    cfg = run.cfg
    eb = cfg.eb_config()
    iters = cfg.training.iterations
    bs = cfg.training.batch_size

    def pretrain():
        net = Denoiser.init(stream(run.seed, "init", 0), **cfg.model_kwargs())
        opt = AdamState.for_params(net.params(), lr=cfg.training.learning_rate)
        rng = stream(run.seed, "train", 0)
        window = min(iters, eb.interval_iters(len(data), bs))
        grad_acc = [np.zeros_like(p) for p in net.params()]
        started = time.perf_counter()
        train(net, opt, data.points, sched, rng, iters - window, None, bs)
        for _ in range(window):
            idx = rng.integers(0, len(data), size=bs)
            train_step(net, opt, data.points[idx], sched, rng, None, grad_acc)
        scores = score_channels(net, eb.criterion, grad_acc, rng)
        mask = extract_mask(scores, eb.rate)
        return mask, time.perf_counter() - started

    def retrain(mask):
        fresh = Denoiser.init(stream(run.seed, "scratch_init", 0), **cfg.model_kwargs())
        net = compact(fresh, mask)
        opt = AdamState.for_params(net.params(), lr=cfg.training.learning_rate)
        rng = stream(run.seed, "scratch_train", 0)
        started = time.perf_counter()
        train(net, opt, data.points, sched, rng, iters, None, bs)
        return net, rng, time.perf_counter() - started

    mask, pre_wall = run.stage("dense_pretrain", pretrain)
    net, rng, wall = run.stage("retrain", retrain, mask)
    save_mask(mask, run.path("masks/scratch.ebmask"))
    _save_net(run, "checkpoints/scratch.ebdf", net, rng.bit_generator.state, mask)
    return cfg.eb_plan(), [net], RunTiming("scratch", wall, pre_wall)


def _run_eb(run, data, sched):
    return _run_regions(run, data, sched, run.cfg.eb_plan(), "eb")


def _run_taeb(run, data, sched):
    return _run_regions(run, data, sched, run.cfg.region_plan(), "taeb")


def _run_regions(run, data, sched, plan, mode):
    cfg = run.cfg
    eb = cfg.eb_config()
    bs, lr = cfg.training.batch_size, cfg.training.learning_rate

    def search():
        started = time.perf_counter()
        results = find_taeb_tickets(plan, data, sched, eb, run.seed, cfg.model_kwargs(), bs, lr,
                                    run.workers)
        return results, time.perf_counter() - started

    searches, search_wall = run.stage("ticket_search", search)
    for i, s in enumerate(searches):
        t = s.ticket
        run.tickets.append({"region": i, "converged": t.converged,
                            "found_at_interval": t.found_at_interval,
                            "found_at_iteration": t.found_at_iteration,
                            "rate": t.rate, "criterion": t.criterion.value})
        save_mask(t.mask, run.path(f"masks/region_{i}/ticket.ebmask"))
        export_distance_matrix(s.distances, run.path(f"heatmaps/region_{i}/hamming"))
        if not t.converged:
            log.warning("region %d: no early-bird ticket, using the last mask", i)

    trained = run.stage("ticket_training", train_regions_parallel, plan, searches, data, sched,
                        run.seed, bs, lr, run.workers)
    for i, (net, state) in enumerate(zip(trained.ensemble.nets, trained.rng_states)):
        _save_net(run, f"checkpoints/region_{i}.ebdf", net, state, trained.ensemble.masks[i])
    timing = RunTiming(mode, trained.total_wall_time, search_wall,
                       [s.ticket.search_wall_time for s in searches], list(trained.wall_times))
    return plan, trained.ensemble.nets, timing


def sampling_route(plan, nets):
    """Single net, or a core-routed ensemble callable for ddim_sample."""
    if len(nets) == 1:
        return nets[0]
    return EnsembleModel(plan, list(nets), [None] * len(nets), [None] * len(nets)).sampler_route


def _sample_and_score(run, plan, nets, sched, heldout):
    cfg = run.cfg
    rng = stream(run.seed, "sample", 0)
    samples = ddim_sample(sampling_route(plan, nets), sched, cfg.sampling.ddim_steps,
                          cfg.sampling.n_samples, rng)
    write_points(samples, run.path("samples/generated.csv"))
    write_points(heldout.points, run.path("samples/reference.csv"))
    # score what was written, so a re-evaluation from the CSVs agrees exactly
    gen = read_points(run.path("samples/generated.csv"))
    ref = read_points(run.path("samples/reference.csv"))
    report = metric_report(gen, ref, derive_seed(run.seed, "metric"), cfg.sampling.n_projections)
    _dump(report.to_dict(), run.path("reports/metrics.json"))


def _reports(run, plan, nets, timing, baseline):
    avg_macs, avg_params = weighted_cost(plan, nets)
    rate = weighted_avg_rate(plan) if run.mode in ("eb", "taeb") else (
        run.cfg.eb.rate if run.mode == "scratch" else 0.0)
    cost = {
        "version": 1,
        "avg_macs": avg_macs,
        "avg_params": avg_params,
        "avg_pruning_rate": rate,
        "regions": [{"core": [r.core_lo, r.core_hi], "train": [r.train_lo, r.train_hi],
                     "rate": r.rate} for r in plan.regions] if run.mode in ("eb", "taeb") else [],
    }
    _dump(cost, run.path("reports/cost.json"))
    timing_doc = {
        "version": 1,
        "mode": timing.mode,
        "search_wall_time": timing.search_wall_time,
        "train_wall_time": timing.train_wall_time,
        "region_search_wall_times": timing.region_search,
        "region_train_wall_times": timing.region_train,
    }
    _dump(timing_doc, run.path("reports/timing.json"))
    base = timing if run.mode == "dense" and baseline is None else (
        read_timing(baseline) if baseline is not None else None)
    if base is None:
        speed = {"version": 1, "baseline_wall_time": None, "method_wall_time": timing.total,
                 "speedup": None, "includes_search_overhead": timing.search_wall_time > 0}
    else:
        speed = {"version": 1, **measure_speedup(base, timing).to_dict()}
    _dump(speed, run.path("reports/speedup.json"))


def read_timing(run_dir):
    doc = json.loads((Path(run_dir) / "reports" / "timing.json").read_text())
    return RunTiming(doc["mode"], doc["train_wall_time"], doc["search_wall_time"])


def _write_manifest(run):
    files = sorted(p for p in run.out.rglob("*") if p.is_file() and p.name != "manifest.json")
    artifacts = []
    for p in files:
        rel = p.relative_to(run.out).as_posix()
        timing = rel in TIMING_FILES
        artifacts.append({"path": rel, "timing": timing,
                          "sha256": None if timing else _sha256(p)})
    manifest = {
        "version": MANIFEST_VERSION,
        "mode": run.mode,
        "config_hash": run.chash,
        "global_seed": run.seed,
        "stages": run.stages,
        "tickets": run.tickets,
        "artifacts": artifacts,
    }
    _dump(manifest, run.out / "manifest.json")


def load_run_model(run_dir):
    """Rebuild ``(plan, nets, config)`` from a finished run directory."""
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    mode = manifest["mode"]
    if mode in ("dense", "scratch"):
        net = load_checkpoint(run_dir / "checkpoints" / f"{mode}.ebdf").to_net()
        return cfg.eb_plan(), [net], cfg
    plan = cfg.eb_plan() if mode == "eb" else cfg.region_plan()
    nets = [load_checkpoint(run_dir / "checkpoints" / f"region_{i}.ebdf").to_net()
            for i in range(len(plan))]
    return plan, nets, cfg
