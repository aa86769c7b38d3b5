"""Timestep-aware early-bird tickets.

The diffusion timeline is cut into regions. Each region gets its own ticket
search (restricted to the region's training timesteps, at the region's
pruning rate) and its own subnetwork; at sampling time every timestep is
routed to the region whose core contains it.

Region bounds use 0-based half-open notation ``[lo, hi)`` over ``0..T-1``. The
diffusion module counts timesteps ``1..T``, so ``[lo, hi)`` here is
``[lo + 1, hi + 1)`` there.
"""
from __future__ import annotations

import bisect
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import train
from .earlybird import find_eb_ticket
from .nn import AdamState, ConfigError, Denoiser
from .pruning import compact
from .seeding import stream


class RegionFailure(RuntimeError):
    def __init__(self, region, cause):
        super().__init__(f"region {region} failed: {cause!r}")
        self.region = region


@dataclass(frozen=True)
class TimestepRegion:
    core_lo: int
    core_hi: int
    train_lo: int
    train_hi: int
    rate: float
    iteration_budget: int = 0

    def __post_init__(self):
        if not (self.train_lo <= self.core_lo < self.core_hi <= self.train_hi):
            raise ConfigError(f"bad region bounds {self}")
        if not (0.0 <= self.rate < 1.0):
            raise ConfigError(f"region rate must be in [0, 1), got {self.rate}")
        if self.iteration_budget < 0:
            raise ConfigError("iteration budget must be non-negative")

    @property
    def core_len(self):
        return self.core_hi - self.core_lo

    def t_range(self):
        """Training timesteps in the diffusion module's 1-based convention."""
        return (self.train_lo + 1, self.train_hi + 1)


@dataclass(frozen=True)
class RegionPlan:
    regions: tuple
    T: int
    overlap_frac: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        self.validate()

    def validate(self):
        if not self.regions:
            raise ConfigError("a plan needs at least one region")
        if self.regions[0].core_lo != 0 or self.regions[-1].core_hi != self.T:
            raise ConfigError("region cores must cover [0, T)")
        for a, b in zip(self.regions[:-1], self.regions[1:]):
            if a.core_hi != b.core_lo:
                raise ConfigError("region cores must be contiguous and non-overlapping")
        for r in self.regions:
            if r.train_lo < 0 or r.train_hi > self.T:
                raise ConfigError("train bounds must lie in [0, T)")
        if sum(r.core_len for r in self.regions) != self.T:
            raise ConfigError("core lengths must sum to T")

    def __len__(self):
        return len(self.regions)

    def region_of(self, t):
        if not (0 <= t < self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        starts = [r.core_lo for r in self.regions]
        return bisect.bisect_right(starts, t) - 1


def build_region_plan(T, boundaries, rates, overlap_frac=0.02, budgets=0):
    """Cores ``[0,b1), [b1,b2), ..., [bk,T)``; interior edges widened by overlap.

    Each region's upper train bound is pushed ``floor(overlap_frac * T)``
    timesteps into the next region, so every interior boundary is shared by
    exactly that many steps. ``budgets`` is one int for all regions or one per
    region.
    """
    boundaries = [int(b) for b in boundaries]
    if len(rates) != len(boundaries) + 1:
        raise ConfigError(f"need {len(boundaries) + 1} rates, got {len(rates)}")
    edges = [0, *boundaries, T]
    if any(a >= b for a, b in zip(edges[:-1], edges[1:])):
        raise ConfigError(f"boundaries must be strictly increasing inside (0, {T}): {boundaries}")
    if not (0.0 <= overlap_frac < 1.0):
        raise ConfigError("overlap_frac must be in [0, 1)")
    if isinstance(budgets, int):
        budgets = [budgets] * len(rates)
    if len(budgets) != len(rates):
        raise ConfigError("need one iteration budget per region")
    pad = math.floor(overlap_frac * T)
    regions = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        train_lo = lo
        train_hi = T if i == len(rates) - 1 else min(T, hi + pad)
        regions.append(TimestepRegion(lo, hi, train_lo, train_hi, float(rates[i]), int(budgets[i])))
    return RegionPlan(tuple(regions), T, overlap_frac)


def weighted_avg_rate(plan):
    """Pruning rate averaged over timesteps, weighted by core length."""
    return sum(r.rate * r.core_len for r in plan.regions) / plan.T


@dataclass
class EnsembleModel:
    plan: RegionPlan
    nets: list
    masks: list
    tickets: list

    def route(self, t):
        """Network for 0-based timestep ``t``."""
        return self.nets[self.plan.region_of(t)]

    def sampler_route(self, t):
        """Network for 1-based diffusion timestep ``t`` (as used by ddim_sample)."""
        return self.route(t - 1)


def route(ensemble, t):
    return ensemble.route(t)


def default_workers(n_tasks):
    return max(1, min(n_tasks, os.cpu_count() or 1))


def _run_tasks(fn, tasks, workers):
    """Map ``fn`` over ``tasks`` in region order, in-process or on a process pool."""
    if workers <= 1 or len(tasks) <= 1:
        out = []
        for i, task in enumerate(tasks):
            try:
                out.append(fn(task))
            except Exception as exc:
                raise RegionFailure(i, exc) from exc
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, task) for task in tasks]
        out = []
        for i, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except Exception as exc:
                for f in futures:
                    f.cancel()
                raise RegionFailure(i, exc) from exc
        return out


@dataclass
class SearchTask:
    index: int
    t_range: tuple
    eb_cfg: object
    points: np.ndarray
    sched: object
    global_seed: int
    model: dict
    batch_size: int
    lr: float


def search_region(task):
    """Ticket search for one region from an independently seeded dense net."""
    net = Denoiser.init(stream(task.global_seed, "init", task.index), **task.model)
    rng = stream(task.global_seed, "search", task.index)
    return find_eb_ticket(net, task.points, task.sched, task.eb_cfg, rng,
                          t_range=task.t_range, batch_size=task.batch_size, lr=task.lr)


def find_taeb_tickets(plan, data, sched, eb_cfg, global_seed, model=None, batch_size=128,
                      lr=1e-3, workers=None):
    """One early-bird search per region; returns ``EBSearch`` results in region order.

    ``eb_cfg.rate`` is overridden by each region's rate. Non-converged searches
    are returned as-is (``converged=False``) for the caller to judge.
    """
    points = data.points if hasattr(data, "points") else np.asarray(data)
    model = dict(model or {})
    tasks = [SearchTask(i, r.t_range(), replace(eb_cfg, rate=r.rate), points, sched,
                        global_seed, model, batch_size, lr)
             for i, r in enumerate(plan.regions)]
    if workers is None:
        workers = default_workers(len(tasks))
    return _run_tasks(search_region, tasks, workers)


@dataclass
class TrainTask:
    index: int
    net: Denoiser
    t_range: tuple
    iterations: int
    points: np.ndarray
    sched: object
    global_seed: int
    batch_size: int
    lr: float


def train_region(task):
    rng = stream(task.global_seed, "train", task.index)
    opt = AdamState.for_params(task.net.params(), lr=task.lr)
    started = time.perf_counter()
    losses = train(task.net, opt, task.points, task.sched, rng, task.iterations,
                   task.t_range, task.batch_size)
    wall = time.perf_counter() - started
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError(f"non-finite training loss in region {task.index}")
    return task.net, losses, wall, rng.bit_generator.state


@dataclass
class RegionTraining:
    ensemble: EnsembleModel
    wall_times: list
    total_wall_time: float
    losses: list
    rng_states: list


def train_regions_parallel(plan, searches, data, sched, global_seed, batch_size=128, lr=1e-3,
                           workers=None):
    """Compact each region's ticket and train it for the region's budget.

    Trainers run on a process pool (one process per region, capped at the CPU
    count); each owns its network, optimizer and RNG stream, so results do not
    depend on scheduling.
    """
    if len(searches) != len(plan):
        raise ConfigError(f"need one ticket per region, got {len(searches)} for {len(plan)}")
    points = data.points if hasattr(data, "points") else np.asarray(data)
    tasks = [TrainTask(i, compact(s.net, s.ticket.mask), r.t_range(), r.iteration_budget,
                       points, sched, global_seed, batch_size, lr)
             for i, (r, s) in enumerate(zip(plan.regions, searches))]
    if workers is None:
        workers = default_workers(len(tasks))
    started = time.perf_counter()
    results = _run_tasks(train_region, tasks, workers)
    total = time.perf_counter() - started
    ensemble = EnsembleModel(plan, [r[0] for r in results],
                             [s.ticket.mask for s in searches], [s.ticket for s in searches])
    return RegionTraining(ensemble, [r[2] for r in results], total, [r[1] for r in results],
                          [r[3] for r in results])
