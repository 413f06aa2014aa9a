"""Small layer kit with hand-written backward passes, Adam, and a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError, PreconditionError, StateError
from .numerics import as_tensor, check_finite

LEAKY_SLOPE = 0.2


def glorot_uniform(rng, fan_out, fan_in):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Linear:
    """Affine map ``y = x W^T + b`` over a batch of row vectors."""

    def __init__(self, n_in, n_out, rng=None, *, W=None, b=None):
        if W is None:
            W = glorot_uniform(rng, n_out, n_in)
        if b is None:
            b = np.zeros(n_out)
        self.W = as_tensor(W).copy()
        self.b = as_tensor(b).copy()
        if self.W.shape != (n_out, n_in) or self.b.shape != (n_out,):
            raise DimensionError("parameter shapes do not match layer size")
        self._x = None

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"expected input [batch x {self.n_in}], got {x.shape}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, grad_out):
        """Return ``(grad_in, grad_W, grad_b)`` for the cached input."""
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        grad_out = as_tensor(grad_out)
        if grad_out.shape != (self._x.shape[0], self.n_out):
            raise DimensionError(
                f"grad_out shape {grad_out.shape} does not match forward output "
                f"{(self._x.shape[0], self.n_out)}"
            )
        grad_W = grad_out.T @ self._x
        grad_b = grad_out.sum(axis=0)
        grad_in = grad_out @ self.W
        return grad_in, grad_W, grad_b


def activation(x, kind):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x, grad_out, kind):
    """Gradient through ``activation`` given its pre-activation input ``x``."""
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "leaky_relu":
        return grad_out * np.where(x > 0, 1.0, LEAKY_SLOPE)
    raise ValueError(f"unknown activation {kind!r}")


class Activation:
    def __init__(self, kind):
        activation(np.zeros(1), kind)
        self.kind = kind
        self._x = None

    def forward(self, x):
        check_finite(x, "activation input")
        self._x = x
        return activation(x, self.kind)

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("activation backward called before forward")
        return activation_backward(self._x, grad_out, self.kind)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are name -> array mappings with identical keys
    and shapes. A non-finite gradient aborts before anything is modified.
    """
    if set(params) != set(grads):
        raise DimensionError("parameter and gradient names differ")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", component=name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    total_steps: int
    lr_min: float = 1e-6


def cosine_lr(schedule: LrSchedule, step):
    if not 0 <= step <= schedule.total_steps:
        raise PreconditionError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.lr_max
    frac = step / schedule.total_steps
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class FDReport:
    max_rel_error: float
    max_abs_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: dict,
    grads: dict,
    tolerance=1e-4,
    *,
    rel_step=1e-5,
    floor=1e-4,
    max_entries=None,
    rng=None,
):
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` takes no arguments and reads the arrays in ``params``, which
    are perturbed in place and restored. The step for entry p is
    ``rel_step * max(1, |p|)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps entries whose true
    gradient is ~0 from being judged on roundoff alone.

    With ``max_entries`` set, at most that many entries per parameter are
    sampled (uniformly, via ``rng``).
    """
    worst_rel, worst_abs, worst_name, count = 0.0, 0.0, "", 0
    for name, p in params.items():
        g = grads[name]
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        if not np.shares_memory(flat, p):
            raise PreconditionError(f"parameter {name} is not contiguous")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = gflat[i]
            err = abs(ana - num)
            rel = err / max(abs(ana), abs(num), floor)
            count += 1
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst_name = rel, f"{name}[{i}]"
    return FDReport(float(worst_rel), float(worst_abs), worst_name, count, tolerance)
