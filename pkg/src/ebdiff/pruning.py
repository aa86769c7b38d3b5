"""Structural pruning of denoiser hidden units.

A mask keeps or drops whole hidden units. Input and output layers are never
pruned. The canonical flat order of a mask is layer-major, unit-minor.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .nn import ConfigError, DenseLayer, Denoiser

MASK_MAGIC = "EBMASK"
MASK_VERSION = "v1"


class CriterionKind(str, Enum):
    MAGNITUDE = "magnitude"
    TAYLOR = "taylor"
    RANDOM = "random"


@dataclass(frozen=True)
class ChannelMask:
    keep: tuple  # one read-only bool array per hidden layer

    def __post_init__(self):
        frozen = []
        for k in self.keep:
            arr = np.array(k, dtype=bool).reshape(-1)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "keep", tuple(frozen))

    @classmethod
    def full(cls, widths):
        return cls(tuple(np.ones(w, dtype=bool) for w in widths))

    @property
    def widths(self):
        return [k.size for k in self.keep]

    @property
    def total_units(self):
        return sum(self.widths)

    @property
    def kept_units(self):
        return int(sum(k.sum() for k in self.keep))

    def kept_widths(self):
        return [int(k.sum()) for k in self.keep]

    def flat(self):
        return np.concatenate(self.keep)

    def __eq__(self, other):
        if not isinstance(other, ChannelMask):
            return NotImplemented
        return self.widths == other.widths and all(
            np.array_equal(a, b) for a, b in zip(self.keep, other.keep))

    def __hash__(self):
        return hash(self.flat().tobytes())

    def to_text(self):
        lines = [f"{MASK_MAGIC} {MASK_VERSION} {len(self.keep)}"]
        lines += ["".join("1" if b else "0" for b in k) for k in self.keep]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines:
            raise ValueError("empty mask file")
        head = lines[0].split()
        if len(head) != 3 or head[0] != MASK_MAGIC:
            raise ValueError(f"bad mask header: {lines[0]!r}")
        if head[1] != MASK_VERSION:
            raise ValueError(f"unsupported mask version {head[1]!r}")
        n = int(head[2])
        body = lines[1:]
        if len(body) != n:
            raise ValueError(f"mask header declares {n} layers, found {len(body)}")
        keep = []
        for line in body:
            if not line or set(line) - {"0", "1"}:
                raise ValueError(f"mask rows must be non-empty 0/1 strings: {line!r}")
            keep.append(np.frombuffer(line.encode(), dtype=np.uint8) == ord("1"))
        return cls(tuple(keep))


def save_mask(mask, path):
    Path(path).write_text(mask.to_text(), encoding="ascii", newline="\n")


def load_mask(path):
    return ChannelMask.from_text(Path(path).read_text(encoding="ascii"))


def _check_mask_shape(net, mask):
    if list(mask.widths) != list(net.hidden_dims):
        raise ValueError(f"mask widths {mask.widths} do not match net {net.hidden_dims}")


def score_channels(net, kind, grad_acc=None, rng=None):
    """Importance score for every hidden unit, one array per hidden layer.

    magnitude: L2 norm of the unit's incoming weights and bias taken together.
    taylor: |sum over incoming weights and bias of param * accumulated grad|.
    random: iid uniform draws from ``rng``.
    """
    kind = CriterionKind(kind)
    hidden = net.layers[:-1]
    if kind is CriterionKind.MAGNITUDE:
        return [np.sqrt(np.sum(l.weights ** 2, axis=1) + l.bias ** 2) for l in hidden]
    if kind is CriterionKind.TAYLOR:
        if grad_acc is None:
            raise ValueError("taylor scoring requires accumulated gradients")
        scores = []
        for i, layer in enumerate(hidden):
            gw, gb = grad_acc[2 * i], grad_acc[2 * i + 1]
            scores.append(np.abs(np.sum(layer.weights * gw, axis=1) + layer.bias * gb))
        return scores
    if rng is None:
        raise ValueError("random scoring requires an rng")
    return [rng.uniform(size=l.fan_out) for l in hidden]


def extract_mask(scores, rate):
    """Prune ``floor(rate * width)`` lowest-scoring units in every layer.

    Ties go to the lower index (it is pruned first). At least one unit per
    layer always survives.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"pruning rate must be in [0, 1), got {rate}")
    keep = []
    for s in scores:
        s = np.asarray(s, dtype=np.float64)
        width = s.size
        n_prune = min(int(np.floor(rate * width)), width - 1)
        # stable sort keeps index order among equal scores
        order = np.argsort(s, kind="stable")
        k = np.ones(width, dtype=bool)
        k[order[:n_prune]] = False
        keep.append(k)
    return ChannelMask(tuple(keep))


def apply_mask(net, mask):
    """A view of ``net`` whose masked hidden units output exactly zero.

    The view shares parameter arrays with ``net``. Masked units get zero
    gradient, so Adam (starting from zero moments) never moves their weights.
    """
    _check_mask_shape(net, mask)
    unit_masks = [k.astype(np.float64) for k in mask.keep]
    return Denoiser(net.layers, net.input_dim, net.time_embed_dim, unit_masks=unit_masks)


def compact(net, mask):
    """Physically remove the dropped units, returning a smaller dense net."""
    _check_mask_shape(net, mask)
    layers = []
    prev_keep = None
    for i, layer in enumerate(net.layers):
        w, b = layer.weights, layer.bias
        if prev_keep is not None:
            w = w[:, prev_keep]
        if i < len(mask.keep):
            w = w[mask.keep[i]]
            b = b[mask.keep[i]]
            prev_keep = mask.keep[i]
        layers.append(DenseLayer(w.copy(), b.copy(), layer.activation))
    return Denoiser(layers, net.input_dim, net.time_embed_dim)


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int


def layer_shapes(net):
    """(fan_in, fan_out) per dense layer, counting only surviving hidden units."""
    if isinstance(net, Denoiser):
        dims = [net.input_dim + net.time_embed_dim]
        widths = net.hidden_dims
        if net.unit_masks is not None:
            widths = [int(np.count_nonzero(m)) for m in net.unit_masks]
        dims += [*widths, net.input_dim]
        return list(zip(dims[:-1], dims[1:]))
    return [(int(a), int(b)) for a, b in net]


def count_cost(net):
    """Parameter and MAC count of a network or of a list of (in, out) shapes."""
    params = macs = 0
    for fan_in, fan_out in layer_shapes(net):
        params += fan_in * fan_out + fan_out
        macs += fan_in * fan_out
    return CostReport(params, macs)


def hamming_distance(a, b):
    """Fraction of unit positions whose keep-bit differs."""
    if a.widths != b.widths:
        raise ValueError(f"mask shapes differ: {a.widths} vs {b.widths}")
    return float(np.count_nonzero(a.flat() != b.flat())) / a.total_units
