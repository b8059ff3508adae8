"""Diffusion-time mathematics: noise schedules and the forward/reverse formulas.

A schedule is the triple of per-step sequences (beta_t, alpha_t, alpha_bar_t)
for t = 1..T. Arrays are 0-indexed internally, so ``betas[t - 1]`` is the
step-t value; the conventional alpha_bar_0 = 1 is represented implicitly via
:meth:`NoiseSchedule.alpha_bar_prev`, which avoids off-by-one bugs in the
reverse-mean formula.

All schedule arithmetic is float64; callers cast down at the kernel boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step noise tables, safe to share across readers."""

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = field(default="linear", compare=False)
    beta_start: float = field(default=0.0, compare=False)  # constructor echo
    beta_end: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            arr = getattr(self, name)
            if arr.shape != (self.steps,):
                raise ValueError(f"{name} must have length {self.steps}, got {arr.shape}")
            arr.setflags(write=False)

    def beta(self, t):
        self._check_t(t)
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        self._check_t(t)
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        self._check_t(t)
        return self.alpha_bars[np.asarray(t) - 1]

    def alpha_bar_prev(self, t):
        """alpha_bar at step t-1, with the implicit alpha_bar_0 = 1."""
        self._check_t(t)
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def log_snr(self, t):
        """Half log signal-to-noise ratio ln(sqrt(ab) / sqrt(1 - ab)) at step t."""
        ab = self.alpha_bar(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def _check_t(self, t):
        t = np.asarray(t)
        if t.size == 0:
            return
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"step index must be integral, got dtype {t.dtype}")
        if t.min() < 1 or t.max() > self.steps:
            raise ValueError(f"step index out of range [1, {self.steps}]: {t}")


def build_schedule(kind: str, steps: int, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Construct a noise schedule of the given family.

    ``linear`` interpolates beta evenly from beta_start to beta_end.
    ``cosine`` derives betas from a squared-cosine signal-retention curve
    (offset 0.008), using beta_end as the per-step clip ceiling; beta_start
    is the floor. Either way alpha = 1 - beta exactly and alpha_bar is the
    running product, so the sequences keep their defining identities.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(steps + 1, dtype=np.float64) / steps
        f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(steps=steps, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, kind=kind,
                         beta_start=beta_start, beta_end=beta_end)


def schedule_config_dict(sched: NoiseSchedule) -> dict:
    """Constructor arguments sufficient to rebuild this schedule exactly."""
    return {"kind": sched.kind, "steps": sched.steps,
            "beta_start": sched.beta_start, "beta_end": sched.beta_end}


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_schedule(d["kind"], d["steps"], d["beta_start"], d["beta_end"])


def _per_item_coeff(values, x):
    """Broadcast per-item scalars over the trailing axes of x."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    if values.shape[0] != x.shape[0]:
        raise ValueError(f"got {values.shape[0]} step indices for batch of {x.shape[0]}")
    return values.reshape(values.shape + (1,) * (x.ndim - 1))


def _check_shapes(x, noise):
    if x.shape != noise.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {noise.shape}")


def forward_step(x_prev, t, noise, sched: NoiseSchedule):
    """One forward corruption step: sqrt(alpha_t) x_prev + sqrt(1 - alpha_t) noise.

    ``t`` may be a scalar step or a per-item vector matching x_prev's leading axis.
    """
    x_prev = np.asarray(x_prev)
    noise = np.asarray(noise)
    _check_shapes(x_prev, noise)
    a = sched.alpha(t)
    ca = _per_item_coeff(np.sqrt(a), x_prev)
    cn = _per_item_coeff(np.sqrt(1.0 - a), x_prev)
    return (ca * x_prev + cn * noise).astype(x_prev.dtype, copy=False)


def forward_marginal(x0, t, noise, sched: NoiseSchedule):
    """Closed-form corruption to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    _check_shapes(x0, noise)
    ab = sched.alpha_bar(t)
    ca = _per_item_coeff(np.sqrt(ab), x0)
    cn = _per_item_coeff(np.sqrt(1.0 - ab), x0)
    return (ca * x0 + cn * noise).astype(x0.dtype, copy=False)


def posterior_mean(x_t, eps_hat, t, sched: NoiseSchedule):
    """Reverse-step mean: (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    _check_shapes(x_t, eps_hat)
    a = np.asarray(sched.alpha(t), dtype=np.float64)
    b = np.asarray(sched.beta(t), dtype=np.float64)
    ab = np.asarray(sched.alpha_bar(t), dtype=np.float64)
    # Guard: ab == 1 with beta > 0 cannot occur for a valid schedule but the
    # division below must never silently produce inf.
    bad = (ab >= 1.0) & (b > 0.0)
    if np.any(bad):
        raise ValueError("alpha_bar_t = 1 with beta_t > 0: invalid schedule state")
    coef = np.where(b == 0.0, 0.0, b / np.sqrt(np.maximum(1.0 - ab, np.finfo(np.float64).tiny)))
    c1 = _per_item_coeff(1.0 / np.sqrt(a), x_t)
    c2 = _per_item_coeff(coef, x_t)
    return (c1 * (x_t - c2 * eps_hat)).astype(x_t.dtype, copy=False)
