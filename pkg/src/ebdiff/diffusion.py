"""Variance-preserving noise schedule, forward noising, training step and DDIM.

Timesteps are 1-indexed internally: ``t = 1..T``. Index 0 of the schedule
arrays is the clean-data state (``alpha = 1``, ``sigma = 0``) so that
``sched.alpha[t]`` reads naturally.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, adam_step


class RouteError(LookupError):
    """No network is registered for a timestep visited by the sampler."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # length T + 1, betas[0] unused (0)
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] = 1
    alpha: np.ndarray
    sigma: np.ndarray


@dataclass
class SampleBatch:
    points: np.ndarray
    source: str
    seed: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or not np.all(np.isfinite(self.points)):
            raise ValueError("points must be a finite 2-D array")

    def __len__(self):
        return self.points.shape[0]


def build_schedule(T=1000, beta_min=1e-4, beta_max=0.02):
    if T < 2:
        raise ConfigError(f"T must be at least 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha_bar = np.cumprod(1.0 - betas)
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    for arr in (betas, alpha_bar, alpha, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alpha_bar, alpha, sigma)


def forward_noise(x0, t, eps, sched):
    """``x_t = alpha_t * x0 + sigma_t * eps`` row by row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t)
    if eps.shape != x0.shape or t.shape != (x0.shape[0],):
        raise ValueError("x0, eps and t shapes disagree")
    if t.size and (t.min() < 1 or t.max() > sched.T):
        raise ValueError(f"timesteps must lie in [1, {sched.T}]")
    return sched.alpha[t][:, None] * x0 + sched.sigma[t][:, None] * eps


def train_step(net, opt, x0, sched, rng, t_range=None, grad_acc=None):
    """One Adam step on the denoising loss; returns the loss before the update.

    ``t_range`` is a half-open ``(lo, hi)`` over internal timesteps, defaulting
    to the full ``(1, T + 1)``. If ``grad_acc`` is given, the step's gradients
    are added into it in place.
    """
    lo, hi = (1, sched.T + 1) if t_range is None else t_range
    if not (1 <= lo < hi <= sched.T + 1):
        raise ValueError(f"invalid timestep range [{lo}, {hi}) for T={sched.T}")
    n = x0.shape[0]
    t = rng.integers(lo, hi, size=n)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, eps, sched)
    loss, grads = net.loss_and_gradients(x_t, t, eps)
    if grad_acc is not None:
        for acc, g in zip(grad_acc, grads):
            acc += g
    adam_step(net.params(), grads, opt)
    return loss


def ddim_timesteps(T, n_steps):
    """Evenly spaced descending timesteps from ``T`` to 1 (both included)."""
    if not (1 <= n_steps <= T):
        raise ConfigError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return np.array([T])
    return np.round(np.linspace(T, 1, n_steps)).astype(np.int64)


def ddim_sample(route, sched, n_steps, n, rng, input_dim=2, x_T=None):
    """Deterministic DDIM sampling.

    ``route`` is either a single network or a callable mapping an internal
    timestep to the network that should handle it. Starting noise is drawn
    from ``rng`` unless ``x_T`` is supplied.
    """
    if hasattr(route, "forward"):
        model = route
        route = lambda t: model  # noqa: E731
    steps = ddim_timesteps(sched.T, n_steps)
    x = rng.standard_normal((n, input_dim)) if x_T is None else np.array(x_T, dtype=np.float64)
    for i, t in enumerate(steps):
        s = steps[i + 1] if i + 1 < len(steps) else 0
        try:
            net = route(int(t))
        except (KeyError, IndexError, LookupError) as exc:
            raise RouteError(f"no network routed for timestep {t}") from exc
        if net is None:
            raise RouteError(f"no network routed for timestep {t}")
        eps_hat = net.forward(x, np.full(n, t))
        x0_hat = (x - sched.sigma[t] * eps_hat) / sched.alpha[t]
        x = sched.alpha[s] * x0_hat + sched.sigma[s] * eps_hat
    return x


def train(net, opt, points, sched, rng, iterations, t_range=None, batch_size=128):
    """Run ``iterations`` minibatch steps; returns the per-step losses."""
    losses = np.empty(iterations)
    for i in range(iterations):
        idx = rng.integers(0, points.shape[0], size=batch_size)
        losses[i] = train_step(net, opt, points[idx], sched, rng, t_range)
    return losses


def eval_loss(net, x0, sched, rng, t_range=None):
    """Denoising loss on ``x0`` with fresh timesteps and noise, no update."""
    lo, hi = (1, sched.T + 1) if t_range is None else t_range
    t = rng.integers(lo, hi, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    diff = net.forward(forward_noise(x0, t, eps, sched), t) - eps
    return float(np.sum(diff * diff) / x0.shape[0])
