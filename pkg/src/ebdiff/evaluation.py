"""Sample-quality metrics, timestep-weighted cost and training speed-up."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .pruning import count_cost

MAX_ENERGY_POINTS = 10_000


@dataclass
class MetricReport:
    energy_distance: float
    sliced_wasserstein: float
    n_generated: int
    n_reference: int
    seed: int

    def to_dict(self):
        return asdict(self)


@dataclass
class SpeedupReport:
    baseline_wall_time: float
    method_wall_time: float
    speedup: float
    includes_search_overhead: bool

    def to_dict(self):
        return asdict(self)


def _points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if a.shape[0] > MAX_ENERGY_POINTS:
        raise ValueError(f"{name} has {a.shape[0]} points; exact energy distance is capped at "
                         f"{MAX_ENERGY_POINTS}")
    return a


def energy_distance(a, b):
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` over all pairs, Euclidean norm."""
    a = _points(a, "first point set")
    b = _points(b, "second point set")
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return float(2.0 * ab - aa - bb)


def sliced_wasserstein(a, b, n_projections=128, rng=None, directions=None):
    """Mean over random unit directions of the 1-D W2 between projections.

    Unequal set sizes are matched by resampling the smaller set with
    replacement. ``directions`` (rows) may be given instead of ``rng``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("point sets must be non-empty")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if directions is None:
        if n_projections < 1:
            raise ValueError("n_projections must be >= 1")
        if rng is None:
            raise ValueError("an rng is required to draw projection directions")
        directions = rng.standard_normal((n_projections, a.shape[1]))
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, a.shape[1])
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    if a.shape[0] != b.shape[0]:
        if rng is None:
            raise ValueError("an rng is required to resample unequal point sets")
        small, large = (a, b) if a.shape[0] < b.shape[0] else (b, a)
        small = small[rng.integers(0, small.shape[0], size=large.shape[0])]
        a, b = small, large
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    w2 = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(w2.mean())


def metric_report(generated, reference, seed, n_projections=128):
    rng = np.random.default_rng(seed)
    return MetricReport(
        energy_distance=energy_distance(generated, reference),
        sliced_wasserstein=sliced_wasserstein(generated, reference, n_projections, rng),
        n_generated=int(len(generated)),
        n_reference=int(len(reference)),
        seed=int(seed),
    )


def weighted_cost(plan, nets):
    """Core-length-weighted average ``(macs, params)`` across region networks."""
    nets = getattr(nets, "nets", nets)
    if len(nets) != len(plan.regions):
        raise ValueError("need one network per region")
    macs = params = 0.0
    for region, net in zip(plan.regions, nets):
        cost = count_cost(net)
        w = region.core_len / plan.T
        macs += cost.macs * w
        params += cost.params * w
    return macs, params


def weighted_macs(plan, nets):
    return weighted_cost(plan, nets)[0]


@dataclass
class RunTiming:
    """Wall-clock phases of one pipeline run.

    ``search_wall_time`` and ``train_wall_time`` are measured from launch to
    last completion of the phase, so concurrent region work counts once.
    """
    mode: str
    train_wall_time: float
    search_wall_time: float = 0.0
    region_search: list = field(default_factory=list)
    region_train: list = field(default_factory=list)

    @property
    def total(self):
        return self.search_wall_time + self.train_wall_time


def measure_speedup(baseline, method):
    for run in (baseline, method):
        if run is None or run.train_wall_time is None:
            raise ValueError("missing timing data")
    base = baseline.total
    meth = method.total
    if meth <= 0:
        raise ValueError("method wall time must be positive")
    return SpeedupReport(
        baseline_wall_time=base,
        method_wall_time=meth,
        speedup=base / meth,
        includes_search_overhead=method.search_wall_time > 0,
    )
