"""Dense denoiser with hand-written backprop, sinusoidal time embedding and Adam.

Everything is float64 numpy. Parameters live in ``Denoiser.layers`` as
(weights, bias) pairs; gradients and optimizer moments use the same
list-of-pairs layout so they can be walked in lockstep.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value."""


class NumericalError(FloatingPointError):
    pass


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps.

    ``t`` may be a scalar or a 1-D array; the result is ``(dim,)`` or
    ``(len(t), dim)``. Column ``2k`` is ``sin(t / 10000**(2k/dim))`` and column
    ``2k+1`` the matching cosine.
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"time embedding dim must be a positive even number, got {dim}")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2, dtype=np.float64)
    freq = 10000.0 ** (2.0 * k / dim)
    arg = t[:, None] / freq[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out[0] if scalar else out


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "silu"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        if self.activation not in ("silu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self):
        return self.weights.shape[1]

    @property
    def fan_out(self):
        return self.weights.shape[0]


class Denoiser:
    """Noise-prediction MLP ``eps(x_t, t)``.

    The time embedding is concatenated to the input of the first layer. Hidden
    layers use SiLU, the output layer is linear. ``unit_masks`` optionally holds
    one 0/1 vector per hidden layer; masked hidden units are multiplied by zero
    after the activation (see :func:`ebdiff.pruning.apply_mask`).
    """

    def __init__(self, layers, input_dim=2, time_embed_dim=32, unit_masks=None):
        self.layers = list(layers)
        self.input_dim = input_dim
        self.time_embed_dim = time_embed_dim
        self.unit_masks = unit_masks
        self._validate()

    @classmethod
    def init(cls, rng, input_dim=2, time_embed_dim=32, hidden_dims=(128, 128, 128)):
        if time_embed_dim <= 0 or time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be positive and even, got {time_embed_dim}")
        if not hidden_dims or any(h < 1 for h in hidden_dims):
            raise ConfigError(f"hidden_dims must be non-empty positive widths, got {hidden_dims}")
        dims = [input_dim + time_embed_dim, *hidden_dims, input_dim]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = "identity" if i == len(dims) - 2 else "silu"
            layers.append(DenseLayer(w, b, act))
        return cls(layers, input_dim, time_embed_dim)

    def _validate(self):
        if len(self.layers) < 2:
            raise ConfigError("a denoiser needs at least one hidden layer")
        if self.layers[0].fan_in != self.input_dim + self.time_embed_dim:
            raise ValueError("first layer fan-in must equal input_dim + time_embed_dim")
        if self.layers[-1].fan_out != self.input_dim or self.layers[-1].activation != "identity":
            raise ValueError("last layer must map to input_dim with identity activation")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ValueError(f"layer widths do not chain: {prev.fan_out} -> {nxt.fan_in}")
        for layer in self.layers[:-1]:
            if layer.activation != "silu":
                raise ValueError("hidden layers must use silu")
        if self.unit_masks is not None:
            widths = self.hidden_dims
            if len(self.unit_masks) != len(widths) or any(
                    m.shape != (w,) for m, w in zip(self.unit_masks, widths)):
                raise ValueError("unit mask shapes do not match hidden widths")

    @property
    def hidden_dims(self):
        return [layer.fan_out for layer in self.layers[:-1]]

    def params(self):
        """Flat list of parameter arrays in canonical order (W0, b0, W1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return copy.deepcopy(self)

    def _check_inputs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"x must have shape (batch, {self.input_dim}), got {x.shape}")
        if t.shape != (x.shape[0],):
            raise ValueError(f"t must have shape ({x.shape[0]},), got {t.shape}")
        return x, t

    def _forward(self, x, t):
        h = np.concatenate([x, time_embedding(t, self.time_embed_dim)], axis=1)
        acts = [h]
        pre = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = h @ layer.weights.T + layer.bias
            pre.append(z)
            if i == last:
                h = z
            else:
                h = silu(z)
                if self.unit_masks is not None:
                    h = h * self.unit_masks[i]
            acts.append(h)
        return h, acts, pre

    def forward(self, x, t):
        """Predicted noise for each row of ``x`` at the matching timestep in ``t``."""
        x, t = self._check_inputs(x, t)
        return self._forward(x, t)[0]

    __call__ = forward

    def loss_and_gradients(self, x_t, t, eps_target):
        """Mean over the batch of the squared L2 error, and its exact gradient.

        Returns ``(loss, grads)`` where ``grads`` matches :meth:`params`.
        """
        x_t, t = self._check_inputs(x_t, t)
        eps_target = np.asarray(eps_target, dtype=np.float64)
        if eps_target.shape != x_t.shape:
            raise ValueError(f"eps_target shape {eps_target.shape} != x_t shape {x_t.shape}")
        out, acts, pre = self._forward(x_t, t)
        diff = out - eps_target
        batch = x_t.shape[0]
        loss = float(np.sum(diff * diff) / batch)
        if not np.isfinite(loss):
            raise NumericalError("non-finite loss")

        grads = [None] * (2 * len(self.layers))
        delta = 2.0 * diff / batch
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            grads[2 * i] = delta.T @ acts[i]
            grads[2 * i + 1] = delta.sum(axis=0)
            if i == 0:
                break
            delta = delta @ layer.weights
            if self.unit_masks is not None:
                delta = delta * self.unit_masks[i - 1]
            delta = delta * silu_grad(pre[i - 1])
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalError("non-finite gradient")
        return loss, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state):
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must have the same length")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
