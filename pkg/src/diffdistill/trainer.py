"""Noise-prediction training: loss and gradients, AdamW, the loop, warm start.

The loop is deterministic given the seed: every iteration draws its batch
indices, timesteps and noise from a stateless substream keyed by
(seed, "train-iter", iteration), so a run resumed from a checkpoint
reproduces subsequent checkpoints bit-exactly (single-worker mode).
"""

from __future__ import annotations

import csv
import fnmatch
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import datastore, denoiser, schedule as sched_mod
from .datastore import Checkpoint, Dataset, LabeledImageBatch, seed_substream
from .errors import DataError, NumericError

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.03
    beta1: float = 0.99
    beta2: float = 0.999
    batch_size: int = 64
    iterations: int = 10_000
    fid_every: int = 1000
    checkpoint_every: int = 1000
    seed: int = 0
    ema: bool = False
    ema_decay: float = 0.9999
    grad_accum: int = 1
    uncond_prob: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("lr must be positive; batch_size >= 1; iterations >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0 or self.fid_every < 1 or self.checkpoint_every < 1:
            raise ValueError("weight_decay >= 0; fid_every and checkpoint_every >= 1")
        if self.grad_accum < 1 or self.batch_size % self.grad_accum:
            raise ValueError("grad_accum must divide batch_size")
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError("uncond_prob must lie in [0, 1]")


@dataclass
class OptimizerState:
    """First/second moment accumulators mirroring the parameter tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def diffusion_loss(cfg: denoiser.DenoiserConfig, params: dict,
                   batch: LabeledImageBatch, sched: sched_mod.NoiseSchedule,
                   rng: np.random.Generator, uncond_prob: float = 0.0):
    """Noise-prediction objective and its exact parameter gradients.

    Draws t uniform in [1, T] and standard-normal noise per item, corrupts
    the batch to step t, and scores mean-over-items of the squared error
    between the true and predicted noise (summed over pixels).
    """
    x0, y = batch.images, batch.labels
    n = x0.shape[0]
    if n == 0:
        raise DataError("empty batch")
    t = rng.integers(1, sched.steps + 1, size=n)
    eps = rng.standard_normal(x0.shape, dtype=x0.dtype)
    y = y.copy()
    if uncond_prob > 0.0:
        drop = rng.random(n) < uncond_prob
        y[drop] = denoiser.UNCONDITIONAL
    x_t = sched_mod.forward_marginal(x0, t, eps, sched)
    eps_hat, cache = denoiser.forward(cfg, params, x_t, t, y, want_cache=True)
    resid = eps_hat - eps
    loss = float((resid.astype(np.float64) ** 2).sum() / n)
    d_eps = (resid * np.asarray(2.0 / n, dtype=resid.dtype))
    grads, _ = denoiser.backward(cfg, params, cache, d_eps)
    return loss, grads


def adamw_step(state: OptimizerState, params: dict, grads: dict,
               cfg: TrainConfig, lr: float | None = None):
    """Decoupled-weight-decay Adam update, in place.

    Aborts (without touching any tensor) if any gradient is non-finite,
    naming the offending parameter.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}; step aborted")
    lr = cfg.lr if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        upd = lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        if cfg.weight_decay:
            upd = upd + (lr * cfg.weight_decay) * p
        p -= upd.astype(p.dtype, copy=False)
    return state, params


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt_state: OptimizerState
    ema: dict[str, np.ndarray] | None
    log: list[dict] = field(default_factory=list)


class MetricLog:
    """CSV metric rows (iteration, loss, fid, wall_seconds), kept in memory
    and optionally streamed to disk."""

    COLUMNS = ("iteration", "loss", "fid", "wall_seconds")

    def __init__(self, path=None, append=False):
        self.rows: list[dict] = []
        self._path = path
        if path is not None and not append:
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def append(self, iteration, loss=None, fid=None, wall_seconds=None):
        row = {"iteration": iteration, "loss": loss, "fid": fid,
               "wall_seconds": wall_seconds}
        self.rows.append(row)
        if self._path is not None:
            with open(self._path, "a", newline="") as f:
                csv.writer(f).writerow(
                    ["" if row[c] is None else row[c] for c in self.COLUMNS])


def _make_checkpoint(model_cfg, cfg, sched, params, state, ema, iteration) -> Checkpoint:
    return Checkpoint(
        kind="denoiser",
        config={"model": _model_config_dict(model_cfg), "train": asdict(cfg),
                "schedule": sched_mod.schedule_config_dict(sched)},
        tensors=params, iteration=iteration,
        rng_state={"root_seed": cfg.seed},
        opt_m=state.m, opt_v=state.v, opt_step=state.step, ema=ema)


def _model_config_dict(cfg: denoiser.DenoiserConfig) -> dict:
    d = asdict(cfg)
    d["image_size"] = list(cfg.image_size)
    return d


def model_config_from_dict(d: dict) -> denoiser.DenoiserConfig:
    d = dict(d)
    d["image_size"] = tuple(d["image_size"])
    return denoiser.DenoiserConfig(**d)


def train(params: dict, data: Dataset, cfg: TrainConfig,
          model_cfg: denoiser.DenoiserConfig, sched: sched_mod.NoiseSchedule,
          *, fid_fn=None, checkpoint_path=None, metric_log: MetricLog | None = None,
          opt_state: OptimizerState | None = None, ema: dict | None = None,
          start_iteration: int = 0) -> TrainResult:
    """Run the training loop for cfg.iterations optimizer steps.

    ``fid_fn(params, iteration)`` is invoked at iteration 0, every
    ``fid_every`` iterations and at the final iteration; its value lands in
    the metric log. Checkpoints go to ``checkpoint_path`` (a single file,
    rewritten atomically) every ``checkpoint_every`` iterations and at the
    end. On a non-finite loss the loop aborts with the last good checkpoint
    retained on disk.
    """
    if len(data) == 0:
        raise DataError("training dataset is empty")
    if data.labels.max() >= model_cfg.num_classes:
        raise DataError("dataset labels exceed model class count")
    log = metric_log if metric_log is not None else MetricLog()
    state = opt_state if opt_state is not None else OptimizerState.zeros_like(params)
    if cfg.ema and ema is None:
        ema = {k: p.copy() for k, p in params.items()}
    micro = cfg.batch_size // cfg.grad_accum
    t0 = time.perf_counter()

    def maybe_fid(iteration):
        if fid_fn is None:
            return None
        return float(fid_fn(params, iteration))

    if start_iteration == 0 and fid_fn is not None:
        log.append(0, fid=maybe_fid(0), wall_seconds=round(time.perf_counter() - t0, 3))

    for it in range(start_iteration + 1, cfg.iterations + 1):
        rng = seed_substream(cfg.seed, "train-iter", it)
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        batch = data.batch(idx)
        grads = None
        loss_acc = 0.0
        for k in range(cfg.grad_accum):
            part = LabeledImageBatch(batch.images[k * micro:(k + 1) * micro],
                                     batch.labels[k * micro:(k + 1) * micro])
            loss_k, g_k = diffusion_loss(model_cfg, params, part, sched, rng,
                                         cfg.uncond_prob)
            loss_acc += loss_k / cfg.grad_accum
            if grads is None:
                grads = g_k
            else:
                for name in grads:
                    grads[name] += g_k[name]
        if cfg.grad_accum > 1:
            for name in grads:
                grads[name] /= cfg.grad_accum
        if not np.isfinite(loss_acc):
            raise NumericError(
                f"non-finite loss at iteration {it}; last checkpoint retained")
        adamw_step(state, params, grads, cfg)
        if cfg.ema:
            d = np.float32(cfg.ema_decay)
            for name, p in params.items():
                ema[name] *= d
                ema[name] += (1 - d) * p

        fid_val = None
        if fid_fn is not None and (it % cfg.fid_every == 0 or it == cfg.iterations):
            fid_val = maybe_fid(it)
        log.append(it, loss=loss_acc, fid=fid_val,
                   wall_seconds=round(time.perf_counter() - t0, 3))
        if checkpoint_path is not None and (
                it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            datastore.write_checkpoint(
                _make_checkpoint(model_cfg, cfg, sched, params, state, ema, it),
                checkpoint_path)
    return TrainResult(params=params, opt_state=state, ema=ema, log=log.rows)


def warm_start(params: dict, ckpt: Checkpoint, skip=()) -> dict:
    """Load checkpoint tensors into fresh parameters, keeping names matched
    by any glob in ``skip`` at their fresh initialization."""
    skip = tuple(skip)
    out = dict(params)
    for name, value in ckpt.tensors.items():
        if name not in out:
            continue
        if any(fnmatch.fnmatch(name, pat) for pat in skip):
            continue
        if out[name].shape != value.shape:
            raise DataError(f"warm start shape mismatch for {name!r}: "
                            f"{value.shape} vs {out[name].shape}")
        out[name] = value.astype(out[name].dtype, copy=True)
    return out
