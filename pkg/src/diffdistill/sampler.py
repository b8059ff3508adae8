"""Reverse-process generation.

Two routes: stochastic ancestral sampling over the full step range, and a
deterministic fast solver on a coarse timestep grid spaced uniformly in
half-log-SNR. The solver's exponential-integrator coefficient is computed in
the algebraically equivalent product form ``a_t * sigma_s / a_s - sigma_t``
(equal to ``sigma_t * expm1(h)``), which stays finite at the terminal point
t = 0 where sigma = 0; the denoiser is never queried at t = 0.

The trajectory helpers operate on arbitrary leading batch dimensions and do
not clamp, so they double as measurement tools for distribution-level
checks; the image-producing public functions clamp outputs to [-1, 1].
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datastore import LabeledImageBatch, seed_substream
from .denoiser import Denoiser, UNCONDITIONAL
from .schedule import NoiseSchedule, posterior_mean

METHODS = ("ancestral", "fast-ode")
VARIANCE_MODES = ("beta", "beta-tilde")


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "fast-ode"
    steps: int = 50
    variance: str = "beta-tilde"
    guidance: float = 1.0
    seed: int = 0
    order: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.variance not in VARIANCE_MODES:
            raise ValueError(f"variance must be one of {VARIANCE_MODES}, got {self.variance!r}")
        if self.guidance < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.guidance}")
        if self.order not in (1, 2):
            raise ValueError(f"solver order must be 1 or 2, got {self.order}")


def sigma_for_step(sched: NoiseSchedule, t, mode: str):
    """Reverse-step noise std: sqrt(beta_t) or the posterior sqrt(beta~_t)."""
    beta = sched.beta(t)
    if mode == "beta":
        return np.sqrt(beta)
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar_prev(t)
    return np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)


def ancestral_trajectory(eps_fn, sched: NoiseSchedule, x_init, cfg: SamplerConfig,
                         rng: np.random.Generator):
    """Full-length stochastic reversal from x_T; x_init carries batch dims.

    Per step: x_{t-1} = posterior_mean(x_t, eps_fn(x_t, t), t) + sigma_t z,
    with z = 0 at the final step t = 1. No clamping.
    """
    x = np.asarray(x_init)
    for t in range(sched.steps, 0, -1):
        eps_hat = eps_fn(x, t)
        x = posterior_mean(x, eps_hat, t, sched)
        if t > 1:
            sigma = sigma_for_step(sched, t, cfg.variance)
            x = x + np.asarray(sigma, dtype=x.dtype) * rng.standard_normal(
                x.shape, dtype=x.dtype if x.dtype in (np.float32, np.float64) else np.float64)
    return x


def ode_grid(sched: NoiseSchedule, steps: int) -> list[int]:
    """Strictly decreasing integer grid [T, ..., 1, 0], uniform in half-log-SNR.

    ``steps`` counts solver transitions; the model is queried at the first
    ``steps`` grid points and never at the appended terminal 0.
    """
    T = sched.steps
    if steps > T:
        raise ValueError(f"solver steps {steps} exceed schedule steps {T}")
    if steps == 1:
        return [T, 0]
    lam = sched.log_snr(np.arange(1, T + 1))  # increasing t -> decreasing lam
    targets = np.linspace(lam[T - 1], lam[0], steps)
    # invert the monotone lam(t) map by interpolation on the ascending view
    t_float = np.interp(targets, lam[::-1], np.arange(T, 0, -1, dtype=np.float64))
    ts = np.rint(t_float).astype(int)
    grid = [T]
    for k in range(1, steps):
        grid.append(min(int(ts[k]), grid[-1] - 1))
    if grid[-1] != 1:
        grid[-1] = 1
    grid.append(0)
    return grid


def _ab_coeffs(sched: NoiseSchedule, t: int):
    """(a_t, sigma_t) = (sqrt(ab_t), sqrt(1 - ab_t)); t = 0 gives (1, 0)."""
    if t == 0:
        return 1.0, 0.0
    ab = float(sched.alpha_bar(t))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def _exp_int_step(x, eps, sched, s, t):
    """First-order exponential-integrator hop s -> t (s > t >= 0)."""
    a_s, sig_s = _ab_coeffs(sched, s)
    a_t, sig_t = _ab_coeffs(sched, t)
    c_x = a_t / a_s
    c_eps = a_t * sig_s / a_s - sig_t  # == sigma_t * expm1(lam_t - lam_s)
    return (np.asarray(c_x, dtype=x.dtype) * x
            - np.asarray(c_eps, dtype=x.dtype) * eps)


def _midpoint_of(sched: NoiseSchedule, s: int, t: int) -> int | None:
    """Integer step whose half-log-SNR is nearest the midpoint of (s, t)."""
    if t < 1:
        return None
    lam_mid = 0.5 * (float(sched.log_snr(s)) + float(sched.log_snr(t)))
    lo, hi = t, s
    cand = np.arange(lo, hi + 1)
    u = int(cand[np.argmin(np.abs(sched.log_snr(cand) - lam_mid))])
    if u <= t or u >= s:
        return None
    return u


def ode_trajectory(eps_fn, sched: NoiseSchedule, x_init, cfg: SamplerConfig):
    """Deterministic solve from x_T down the log-SNR-uniform grid to t = 0.

    Order 1 is the plain exponential-integrator update; order 2 (default)
    adds the midpoint correction, falling back to order 1 on transitions
    with no usable interior midpoint (including the final hop to 0).
    """
    x = np.asarray(x_init)
    grid = ode_grid(sched, cfg.steps)
    for s, t in zip(grid[:-1], grid[1:]):
        eps_s = eps_fn(x, s)
        if cfg.order == 2:
            u = _midpoint_of(sched, s, t)
            if u is not None:
                x_mid = _exp_int_step(x, eps_s, sched, s, u)
                x = _exp_int_step(x, eps_fn(x_mid, u), sched, s, t)
                continue
        x = _exp_int_step(x, eps_s, sched, s, t)
    return x


def model_eps_fn(model: Denoiser, y, guidance: float = 1.0):
    """Batched noise-estimate closure for a fixed conditioning label.

    Guidance 1.0 takes the purely conditional path (the unconditional
    branch is never evaluated, keeping the output bit-identical to the
    conditional estimate).
    """
    def eps_fn(x, t):
        single = x.ndim == 3
        xb = x[None] if single else x
        cond = model.predict(xb, t, y)
        if guidance != 1.0:
            uncond = model.predict(xb, t, UNCONDITIONAL)
            cond = uncond + np.asarray(guidance, dtype=cond.dtype) * (cond - uncond)
        return cond[0] if single else cond
    return eps_fn


def _sample_one(model: Denoiser, sched: NoiseSchedule, y: int,
                cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    shape = (*model.config.image_size, model.config.channels)
    x_init = rng.standard_normal(shape, dtype=np.float32)
    eps_fn = model_eps_fn(model, y, cfg.guidance)
    if cfg.method == "ancestral":
        x = ancestral_trajectory(eps_fn, sched, x_init, cfg, rng)
    else:
        x = ode_trajectory(eps_fn, sched, x_init, cfg)
    return np.clip(x, -1.0, 1.0)


def ancestral_sample(model: Denoiser, sched: NoiseSchedule, y: int,
                     cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic sample for class y, clamped to [-1, 1]."""
    _check_labels(model, [y])
    if cfg.method != "ancestral":
        raise ValueError("ancestral_sample requires method='ancestral'")
    return _sample_one(model, sched, y, cfg, rng)


def fast_ode_sample(model: Denoiser, sched: NoiseSchedule, y: int,
                    cfg: SamplerConfig) -> np.ndarray:
    """One deterministic fast-solver sample for class y, clamped to [-1, 1]."""
    _check_labels(model, [y])
    if cfg.method != "fast-ode":
        raise ValueError("fast_ode_sample requires method='fast-ode'")
    rng = seed_substream(cfg.seed, "sample", 0)
    return _sample_one(model, sched, y, cfg, rng)


def _check_labels(model: Denoiser, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.num_classes):
        raise ValueError(f"label out of range [0, {model.config.num_classes}): "
                         f"{labels[(labels < 0) | (labels >= model.config.num_classes)][0]}")


def sample_class_batch(model: Denoiser, sched: NoiseSchedule, labels,
                       cfg: SamplerConfig, workers: int = 1,
                       index_offset: int = 0, stream_tag: str = "sample") -> LabeledImageBatch:
    """One image per requested label, each from its own RNG substream.

    Substreams are keyed by (cfg.seed, stream_tag, index_offset + position),
    so batched, item-by-item and multi-worker execution produce bit-identical
    output. All labels are validated before any work starts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(model, labels)
    h, w = model.config.image_size
    images = np.empty((len(labels), h, w, model.config.channels), dtype=np.float32)

    def gen(i):
        rng = seed_substream(cfg.seed, stream_tag, index_offset + i)
        images[i] = _sample_one(model, sched, int(labels[i]), cfg, rng)

    if workers > 1 and len(labels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(gen, range(len(labels))))
    else:
        for i in range(len(labels)):
            gen(i)
    return LabeledImageBatch(images=images, labels=labels.copy())
