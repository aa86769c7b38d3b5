"""Early-bird ticket detection.

During dense training a pruning mask is drawn after every detection interval
and pushed into a FIFO queue. The ticket is declared once the queue is full
and every pair of masks in it differs by less than ``epsilon`` (normalized
Hamming distance).
"""
from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import train_step
from .nn import AdamState, ConfigError
from .pruning import ChannelMask, CriterionKind, extract_mask, hamming_distance, score_channels

log = logging.getLogger(__name__)

GRANULARITIES = ("epoch", "pseudo_epoch", "iteration")


@dataclass
class EBConfig:
    epsilon: float = 0.1
    queue_len: int = 5
    granularity: str = "pseudo_epoch"
    pseudo_epoch_iters: int = 1000
    criterion: CriterionKind = CriterionKind.MAGNITUDE
    rate: float = 0.5
    max_intervals: int = 100
    # masks recorded after detection, for the heatmap only (None -> queue_len)
    record_extra: int | None = None

    def __post_init__(self):
        self.criterion = CriterionKind(self.criterion)
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.queue_len < 2:
            raise ConfigError("queue_len must be at least 2")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if self.pseudo_epoch_iters < 1:
            raise ConfigError("pseudo_epoch_iters must be positive")
        if not (100 <= self.pseudo_epoch_iters <= 5000):
            log.debug("pseudo-epoch of %d iterations is outside the usual 100-5000 range",
                      self.pseudo_epoch_iters)
        if not (0.0 <= self.rate < 1.0):
            raise ConfigError("rate must be in [0, 1)")
        if self.max_intervals < 1:
            raise ConfigError("max_intervals must be positive")

    def interval_iters(self, n_train, batch_size):
        if self.granularity == "iteration":
            return 1
        if self.granularity == "epoch":
            return math.ceil(n_train / batch_size)
        return self.pseudo_epoch_iters

    @property
    def extra(self):
        return self.queue_len if self.record_extra is None else self.record_extra


class MaskQueue:
    """Fixed-capacity FIFO of masks; the oldest is evicted first."""

    def __init__(self, capacity, epsilon):
        if capacity < 2:
            raise ConfigError("queue capacity must be at least 2")
        self.capacity = capacity
        self.epsilon = epsilon
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def full(self):
        return len(self._items) == self.capacity

    def max_distance(self):
        items = list(self._items)
        return max((hamming_distance(a, b) for i, a in enumerate(items) for b in items[i + 1:]),
                   default=0.0)


def push_and_check(queue, mask):
    """Append ``mask`` and report whether the queue has converged."""
    if len(queue) and queue._items[0].widths != mask.widths:
        raise ValueError(f"mask shape {mask.widths} does not match queue {queue._items[0].widths}")
    queue._items.append(mask)
    return queue.full and queue.max_distance() < queue.epsilon


def replay_detection(masks, epsilon, queue_len):
    """1-based interval at which a recorded mask sequence converges, or None."""
    q = MaskQueue(queue_len, epsilon)
    for i, m in enumerate(masks, start=1):
        if push_and_check(q, m):
            return i
    return None


@dataclass
class DistanceMatrix:
    d: np.ndarray
    detected_at: int | None = None  # 1-based interval

    @classmethod
    def from_masks(cls, masks, detected_at=None):
        n = len(masks)
        d = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d[i, j] = d[j, i] = hamming_distance(masks[i], masks[j])
        return cls(d, detected_at)

    @property
    def n(self):
        return self.d.shape[0]

    def check(self):
        d = self.d
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            raise ValueError("distance matrix must be square and non-empty")
        if not np.array_equal(d, d.T):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(d) != 0):
            raise ValueError("distance matrix diagonal is not zero")
        if np.any(d < 0) or np.any(d > 1):
            raise ValueError("distance matrix entries outside [0, 1]")


@dataclass
class TicketRecord:
    mask: ChannelMask
    found_at_interval: int
    found_at_iteration: int
    criterion: CriterionKind
    rate: float
    search_wall_time: float
    converged: bool = True


@dataclass
class EBSearch:
    """Outcome of :func:`find_eb_ticket`.

    ``ticket`` always holds the last mask drawn up to the stop point; check
    ``converged`` before trusting it as an early-bird ticket.
    """
    ticket: TicketRecord
    distances: DistanceMatrix
    masks: list
    net: object
    opt: AdamState
    converged: bool = field(default=True)


def find_eb_ticket(net, data, sched, cfg, rng, t_range=None, batch_size=128, lr=1e-3,
                   opt=None):
    """Train ``net`` densely until the pruning mask stabilizes.

    ``net`` is trained in place. The returned ``EBSearch.net`` is a snapshot of
    the weights at the detection interval; if extra heatmap intervals are
    recorded, ``net`` itself has moved past that point.
    """
    points = data.points if hasattr(data, "points") else np.asarray(data)
    if points.shape[0] == 0:
        raise ValueError("dataset is empty")
    if opt is None:
        opt = AdamState.for_params(net.params(), lr=lr)
    per_interval = cfg.interval_iters(points.shape[0], batch_size)
    queue = MaskQueue(cfg.queue_len, cfg.epsilon)
    masks = []
    detected = None
    snapshot = None
    started = time.perf_counter()
    search_time = None
    stop_at = cfg.max_intervals

    interval = 0
    while interval < stop_at:
        interval += 1
        grad_acc = None
        if cfg.criterion is CriterionKind.TAYLOR:
            grad_acc = [np.zeros_like(p) for p in net.params()]
        for _ in range(per_interval):
            idx = rng.integers(0, points.shape[0], size=batch_size)
            train_step(net, opt, points[idx], sched, rng, t_range, grad_acc)
        scores = score_channels(net, cfg.criterion, grad_acc, rng)
        mask = extract_mask(scores, cfg.rate)
        masks.append(mask)
        if detected is None and push_and_check(queue, mask):
            detected = interval
            search_time = time.perf_counter() - started
            snapshot = (net.copy(), _copy_opt(opt))
            stop_at = min(cfg.max_intervals, interval + cfg.extra)
            log.info("early-bird ticket at interval %d (iteration %d)",
                     interval, interval * per_interval)

    converged = detected is not None
    if not converged:
        search_time = time.perf_counter() - started
        snapshot = (net.copy(), _copy_opt(opt))
        found = cfg.max_intervals
        ticket_mask = masks[-1]
        log.warning("no early-bird ticket within %d intervals", cfg.max_intervals)
    else:
        found = detected
        ticket_mask = masks[detected - 1]
    ticket = TicketRecord(
        mask=ticket_mask,
        found_at_interval=found,
        found_at_iteration=found * per_interval,
        criterion=cfg.criterion,
        rate=cfg.rate,
        search_wall_time=search_time,
        converged=converged,
    )
    dist = DistanceMatrix.from_masks(masks, detected)
    return EBSearch(ticket, dist, masks, snapshot[0], snapshot[1], converged)


def _copy_opt(opt):
    return AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step,
                     [m.copy() for m in opt.m], [v.copy() for v in opt.v])


def export_distance_matrix(m, path):
    """Write ``<path>.csv``, ``<path>.pgm`` and ``<path>.meta``.

    ``path`` is a stem; any suffix is replaced. Returns the three paths.
    """
    m.check()
    stem = Path(path).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    pgm_path = stem.with_suffix(".pgm")
    meta_path = stem.with_suffix(".meta")

    rows = [",".join(f"{v:.6f}" for v in row) for row in m.d]
    csv_path.write_text("\n".join(rows) + "\n", encoding="ascii", newline="\n")

    pixels = np.rint(255.0 * (1.0 - m.d)).astype(np.uint8)
    header = f"P5\n{m.n} {m.n}\n255\n".encode("ascii")
    pgm_path.write_bytes(header + pixels.tobytes())

    detected = "none" if m.detected_at is None else str(m.detected_at)
    meta_path.write_text(f"detected_at={detected}\n", encoding="ascii", newline="\n")
    return csv_path, pgm_path, meta_path


def read_distance_csv(path):
    text = Path(path).read_text(encoding="ascii").strip()
    return np.array([[float(v) for v in line.split(",")] for line in text.splitlines()])
