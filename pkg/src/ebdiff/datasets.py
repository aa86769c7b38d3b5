"""2-D toy datasets and the CSV point-set format."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .diffusion import SampleBatch

DATASETS = ("gauss8", "two_moons", "swiss_roll", "checkerboard")


def _normalize(x):
    # zero mean, unit average per-coordinate variance; aspect ratio preserved
    x = x - x.mean(axis=0)
    return x / np.sqrt(np.mean(x ** 2))


def _gauss8(n, rng):
    mode = rng.integers(0, 8, size=n)
    angle = 2.0 * np.pi * mode / 8.0
    centers = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + 0.05 * rng.standard_normal((n, 2))


def _two_moons(n, rng, noise=0.1):
    n_outer = n // 2
    theta = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    x = np.where((np.arange(n) < n_outer)[:, None], outer, inner)
    return _normalize(x + noise * rng.standard_normal((n, 2)))


def _swiss_roll(n, rng, noise=0.5):
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
    x = np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    return _normalize(x + noise * rng.standard_normal((n, 2)))


def _checkerboard(n, rng):
    x1 = rng.uniform(size=n) * 4.0 - 2.0
    x2 = rng.uniform(size=n) - rng.integers(0, 2, size=n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return _normalize(np.stack([x1, x2], axis=1) * 2.0)


_BUILDERS = {"gauss8": _gauss8, "two_moons": _two_moons, "swiss_roll": _swiss_roll,
             "checkerboard": _checkerboard}


def generate_dataset(name, n, seed):
    """``n`` points from a named toy distribution, deterministic in ``seed``.

    gauss8 is eight equal-weight Gaussians (std 0.05) centred on the unit
    circle; the others are standardized to zero mean and unit scale.
    """
    if name not in _BUILDERS:
        raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    return SampleBatch(_BUILDERS[name](n, rng), name, seed)


def write_points(points, path):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("point CSV holds 2-D points")
    lines = ["x,y"] + [f"{x:.9g},{y:.9g}" for x, y in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii", newline="\n")


def read_points(path):
    lines = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not lines or lines[0].strip() != "x,y":
        raise ValueError(f"{path}: expected header 'x,y'")
    pts = np.array([[float(v) for v in line.split(",")] for line in lines[1:]], dtype=np.float64)
    return pts.reshape(-1, 2)
