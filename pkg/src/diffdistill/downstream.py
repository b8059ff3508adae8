"""Downstream evaluation: train a small ConvNet on a distilled set, test on
real held-out data, average over seeds.

The ConvNet is the dataset-condensation convention: ``blocks`` repetitions of
[3x3 conv - group norm - relu - 2x2 average pool], flattened into a single
linear head. Its penultimate (flattened) features also serve as the frozen
embedding for generation-quality scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .datastore import Dataset, LabeledImageBatch, seed_substream
from .errors import DataError
from .trainer import OptimizerState, TrainConfig, adamw_step


@dataclass(frozen=True)
class ConvNetConfig:
    num_classes: int
    image_size: tuple[int, int]
    channels: int = 3
    blocks: int = 3
    width: int = 128
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    augment: bool = False

    def __post_init__(self):
        if self.blocks < 1 or self.width < 1 or self.num_classes < 1:
            raise ValueError("blocks, width and num_classes must be positive")
        h, w = self.image_size
        if h % (2 ** self.blocks) or w % (2 ** self.blocks):
            raise ValueError(f"image {h}x{w} not divisible by 2^{self.blocks} pooling")

    @property
    def groups(self) -> int:
        return math.gcd(self.width, 8)

    @property
    def feature_dim(self) -> int:
        h, w = self.image_size
        return (h >> self.blocks) * (w >> self.blocks) * self.width


def convnet_param_shapes(cfg: ConvNetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = cfg.channels
    for i in range(cfg.blocks):
        shapes[f"conv{i}.w"] = (3, 3, c_in, cfg.width)
        shapes[f"conv{i}.b"] = (cfg.width,)
        shapes[f"norm{i}.g"] = (cfg.width,)
        shapes[f"norm{i}.b"] = (cfg.width,)
        c_in = cfg.width
    shapes["head.w"] = (cfg.feature_dim, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_convnet(cfg: ConvNetConfig, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in convnet_param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) *
                            math.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def convnet_forward(cfg: ConvNetConfig, params: dict, x, want_cache=False):
    """Returns (logits, features, cache); features are the flattened
    penultimate activations."""
    caches = []
    h = x
    for i in range(cfg.blocks):
        h, c1 = K.conv3x3_fwd(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        h, c2 = K.groupnorm_fwd(h, params[f"norm{i}.g"], params[f"norm{i}.b"], cfg.groups)
        h, c3 = K.relu_fwd(h)
        h, c4 = K.avgpool2_fwd(h)
        caches.append((c1, c2, c3, c4))
    feats = h.reshape(h.shape[0], -1)
    logits, head_c = K.linear_fwd(feats, params["head.w"], params["head.b"])
    if not want_cache:
        return logits, feats, None
    return logits, feats, (caches, head_c, h.shape)


def convnet_backward(cfg: ConvNetConfig, cache, dlogits):
    caches, head_c, pooled_shape = cache
    grads = {}
    dfeats, grads["head.w"], grads["head.b"] = K.linear_bwd(dlogits, head_c)
    dh = dfeats.reshape(pooled_shape)
    for i in range(cfg.blocks - 1, -1, -1):
        c1, c2, c3, c4 = caches[i]
        dh = K.avgpool2_bwd(dh, c4)
        dh = K.relu_bwd(dh, c3)
        dh, grads[f"norm{i}.g"], grads[f"norm{i}.b"] = K.groupnorm_bwd(dh, c2)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = K.conv3x3_bwd(dh, c1)
    return grads, dh


def _augment_batch(images, rng, pad=2):
    """Random horizontal flip plus zero-pad-and-crop jitter."""
    B, H, W, C = images.shape
    out = images.copy()
    flips = rng.random(B) < 0.5
    out[flips] = out[flips, :, ::-1]
    padded = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=images.dtype)
    padded[:, pad:pad + H, pad:pad + W] = out
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    for i in range(B):
        oy, ox = offs[i]
        out[i] = padded[i, oy:oy + H, ox:ox + W]
    return out


def _as_training_arrays(source) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(source, (Dataset, LabeledImageBatch)):
        return source.images, source.labels
    if hasattr(source, "images") and hasattr(source, "labels"):
        return source.images, source.labels
    raise TypeError(f"cannot train on {type(source).__name__}")


def train_classifier(source, cfg: ConvNetConfig, seed: int) -> dict[str, np.ndarray]:
    """Cross-entropy training with AdamW and a cosine-decayed rate.

    Deterministic given the seed: init, epoch shuffles and augmentation all
    come from substreams of it.
    """
    images, labels = _as_training_arrays(source)
    n = images.shape[0]
    if n == 0:
        raise DataError("cannot train a classifier on an empty set")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise DataError(f"labels out of range [0, {cfg.num_classes})")
    params = init_convnet(cfg, seed_substream(seed, "cls-init"))
    opt = OptimizerState.zeros_like(params)
    opt_cfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                          beta1=0.9, beta2=0.999, batch_size=max(1, cfg.batch_size),
                          iterations=max(1, cfg.epochs))
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        rng = seed_substream(seed, "cls-epoch", epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx]
            if cfg.augment:
                xb = _augment_batch(xb, rng)
            logits, _, cache = convnet_forward(cfg, params, xb, want_cache=True)
            _, dlogits = K.softmax_xent_fwd(logits, labels[idx])
            grads, _ = convnet_backward(cfg, cache, dlogits)
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))
            adamw_step(opt, params, grads, opt_cfg, lr=lr)
            step += 1
    return params


def evaluate(params: dict, cfg: ConvNetConfig, test_source,
             batch_size: int = 256) -> float:
    """Top-1 accuracy over the full test set, single pass, no augmentation."""
    images, labels = _as_training_arrays(test_source)
    if images.shape[0] == 0:
        raise DataError("empty test set")
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        logits, _, _ = convnet_forward(cfg, params, xb)
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / images.shape[0]


@dataclass
class EvalReport:
    """Per-seed accuracies with derived summary statistics."""

    accuracies: list[float]
    train_fingerprint: str
    test_fingerprint: str
    baseline_accuracy: float | None = None
    label: str = ""
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def lines(self) -> list[str]:
        out = [f"runs: {len(self.accuracies)}"]
        for s, a in zip(self.seeds, self.accuracies):
            out.append(f"  seed {s}: accuracy {a:.4f}")
        out.append(f"mean {self.mean:.4f} +- {self.std:.4f}")
        if self.baseline_accuracy is not None:
            out.append(f"real-data baseline {self.baseline_accuracy:.4f}")
        out.append(f"train fingerprint {self.train_fingerprint}")
        out.append(f"test fingerprint {self.test_fingerprint}")
        return out


def _fingerprint_of(source) -> str:
    if hasattr(source, "fingerprint"):
        fp = source.fingerprint
        return fp() if callable(fp) else fp
    return "unknown"


def protocol(train_source, test_source, cfg: ConvNetConfig, seeds=3,
             baseline_source=None, label: str = "") -> EvalReport:
    """Train/evaluate once per seed and summarize mean and spread.

    ``seeds`` is a count (seeds 0..k-1) or an explicit list. When
    ``baseline_source`` is given, the same ConvNet recipe is also trained on
    it (seed 0) and reported as the upper baseline.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seed_list:
        raise ValueError("need at least one seed")
    accs = []
    for s in seed_list:
        params = train_classifier(train_source, cfg, seed=s)
        accs.append(evaluate(params, cfg, test_source))
    baseline = None
    if baseline_source is not None:
        params = train_classifier(baseline_source, cfg, seed=seed_list[0])
        baseline = evaluate(params, cfg, test_source)
    return EvalReport(accuracies=accs, seeds=seed_list,
                      train_fingerprint=_fingerprint_of(train_source),
                      test_fingerprint=_fingerprint_of(test_source),
                      baseline_accuracy=baseline, label=label)
