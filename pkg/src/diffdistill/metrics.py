"""Generation-quality scoring: Gaussian feature statistics and the Fréchet
distance, with PSD square-root numerics.

Feature statistics are kept as mergeable sufficient statistics (count, sum,
outer-product sum) in float64, so accumulation is associative and
order-insensitive up to floating-point reassociation. The embedding comes
from a ConvNet trained once on the real training set with a fixed seed,
then frozen and fingerprinted; scores are comparable only between runs that
share an extractor fingerprint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import downstream, sampler
from .datastore import (Dataset, _atomic_write, _read_file, fingerprint_tensors,
                        seed_substream)
from .errors import DataError, NumericError

STATS_MAGIC = b"DDGS"
STATS_VERSION = 1


@dataclass(frozen=True)
class GaussianStats:
    """Mean/covariance accumulator over d-vectors; immutable and mergeable."""

    dim: int
    n: int = 0
    vec_sum: np.ndarray | None = None
    outer_sum: np.ndarray | None = None

    @classmethod
    def zero(cls, dim: int) -> "GaussianStats":
        return cls(dim=dim, n=0, vec_sum=np.zeros(dim),
                   outer_sum=np.zeros((dim, dim)))

    @property
    def mean(self) -> np.ndarray:
        if self.n < 1:
            raise DataError("mean undefined: no samples accumulated")
        return self.vec_sum / self.n

    @property
    def cov(self) -> np.ndarray:
        """Unbiased covariance; requires n >= 2."""
        if self.n < 2:
            raise DataError(f"covariance undefined for n = {self.n} (need >= 2)")
        mu = self.mean
        c = (self.outer_sum - self.n * np.outer(mu, mu)) / (self.n - 1)
        return 0.5 * (c + c.T)

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        if self.dim != other.dim:
            raise DataError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return GaussianStats(dim=self.dim, n=self.n + other.n,
                             vec_sum=self.vec_sum + other.vec_sum,
                             outer_sum=self.outer_sum + other.outer_sum)


def accumulate(stats: GaussianStats, features: np.ndarray) -> GaussianStats:
    """Fold a batch of d-vectors (rows) into the sufficient statistics."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != stats.dim:
        raise DataError(f"feature dimension {features.shape[1]} != stats dim {stats.dim}")
    return GaussianStats(dim=stats.dim, n=stats.n + features.shape[0],
                         vec_sum=stats.vec_sum + features.sum(axis=0),
                         outer_sum=stats.outer_sum + features.T @ features)


def matrix_sqrt_psd(s: np.ndarray, sym_tol: float = 1e-6,
                    eig_floor: float = -1e-8) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition.

    Rejects inputs that are asymmetric beyond ``sym_tol`` (relative
    Frobenius) or carry an eigenvalue below the ``eig_floor`` noise floor;
    eigenvalues in [eig_floor, 0) are clamped to 0.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got {s.shape}")
    denom = max(1.0, float(np.linalg.norm(s)))
    asym = float(np.linalg.norm(s - s.T)) / denom
    if asym > sym_tol:
        raise NumericError(f"matrix asymmetric beyond tolerance: {asym:.3e}")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    if vals.min() < eig_floor * denom:
        raise NumericError(f"eigenvalue {vals.min():.3e} below noise floor")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2).

    The trace argument is symmetrized as C1^1/2 C2 C1^1/2 so the inner
    square root always sees a PSD matrix. Tiny negative results (above
    -1e-6) are clamped to zero.
    """
    if s1.dim != s2.dim:
        raise DataError(f"dimension mismatch: {s1.dim} vs {s2.dim}")
    if s1.n < 2 or s2.n < 2:
        raise DataError(f"need n >= 2 on both sides, got {s1.n} and {s2.n}")
    mu1, mu2 = s1.mean, s2.mean
    c1, c2 = s1.cov, s2.cov
    r1 = matrix_sqrt_psd(c1)
    inner = matrix_sqrt_psd(r1 @ c2 @ r1)
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(c1) + np.trace(c2)
              - 2.0 * np.trace(inner))
    if d < -1e-6:
        raise NumericError(f"Frechet distance {d:.3e} below the negative tolerance")
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# feature extractor


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen image-to-vector embedding with a parameter fingerprint."""

    config: downstream.ConvNetConfig
    params: dict[str, np.ndarray] = field(repr=False)
    fingerprint: str = ""

    @property
    def dim(self) -> int:
        return self.config.feature_dim

    def extract(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = np.empty((images.shape[0], self.dim))
        for start in range(0, images.shape[0], batch_size):
            xb = images[start:start + batch_size]
            _, feats, _ = downstream.convnet_forward(self.config, self.params, xb)
            out[start:start + xb.shape[0]] = feats.astype(np.float64)
        return out


def extractor_fingerprint(cfg: downstream.ConvNetConfig, params: dict) -> str:
    import hashlib
    h = hashlib.sha256(repr(cfg).encode())
    h.update(fingerprint_tensors(params).encode())
    return h.hexdigest()[:16]


def build_feature_extractor(real_train: Dataset, seed: int = 7,
                            width: int = 64, epochs: int = 20,
                            blocks: int | None = None) -> FeatureExtractor:
    """Train the embedding ConvNet once on real data, then freeze it."""
    h, w = real_train.image_shape[:2]
    if blocks is None:
        blocks = max(1, min(3, (min(h, w).bit_length() - 2)))
    cfg = downstream.ConvNetConfig(
        num_classes=real_train.num_classes, image_size=(h, w),
        channels=real_train.image_shape[2], blocks=blocks, width=width,
        epochs=epochs, lr=1e-3)
    params = downstream.train_classifier(real_train, cfg, seed=seed)
    return FeatureExtractor(config=cfg, params=params,
                            fingerprint=extractor_fingerprint(cfg, params))


def reference_stats(data: Dataset, extractor: FeatureExtractor,
                    batch_size: int = 256) -> GaussianStats:
    """Gaussian feature statistics over a full real dataset."""
    stats = GaussianStats.zero(extractor.dim)
    for batch in data.iter_batches(batch_size):
        stats = accumulate(stats, extractor.extract(batch.images))
    return stats


def save_stats(stats: GaussianStats, fingerprint: str, path) -> None:
    mu = np.ascontiguousarray(stats.mean, dtype="<f8")
    cov = np.ascontiguousarray(stats.cov, dtype="<f8")
    fp = fingerprint.encode("utf-8")
    head = STATS_MAGIC + struct.pack("<HIQH", STATS_VERSION, stats.dim,
                                     stats.n, len(fp))
    _atomic_write(path, head + fp + mu.tobytes() + cov.tobytes())


def load_stats(path) -> tuple[GaussianStats, str]:
    """Read a persisted stats record; returns (stats, extractor fingerprint).

    The returned stats reproduce the saved mean/covariance exactly; their
    sufficient statistics are reconstructed accordingly.
    """
    blob = _read_file(path)
    if blob[:4] != STATS_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    ver, dim, n, fplen = struct.unpack_from("<HIQH", blob, 4)
    if ver != STATS_VERSION:
        raise DataError(f"{path}: unsupported stats version {ver}")
    off = 4 + struct.calcsize("<HIQH")
    fp = blob[off:off + fplen].decode("utf-8")
    off += fplen
    need = off + dim * 8 + dim * dim * 8
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(blob)}")
    mu = np.frombuffer(blob, dtype="<f8", count=dim, offset=off)
    cov = np.frombuffer(blob, dtype="<f8", count=dim * dim,
                        offset=off + dim * 8).reshape(dim, dim)
    vec_sum = mu * n
    outer_sum = cov * (n - 1) + n * np.outer(mu, mu)
    stats = GaussianStats(dim=dim, n=n, vec_sum=vec_sum,
                          outer_sum=0.5 * (outer_sum + outer_sum.T))
    return stats, fp


# ---------------------------------------------------------------------------
# FID evaluation


def generate_for_fid(model, sched, cfg: sampler.SamplerConfig, n_samples: int,
                     num_classes: int, batch_size: int = 128,
                     stream_tag: str = "fid") -> np.ndarray:
    """Class-balanced generation for scoring, batched for throughput.

    Initial noise comes from per-item substreams; the solver runs whole
    batches at once (fast deterministic method recommended here).
    """
    labels = np.arange(n_samples) % num_classes
    h, w = model.config.image_size
    ch = model.config.channels
    images = np.empty((n_samples, h, w, ch), dtype=np.float32)
    for start in range(0, n_samples, batch_size):
        stop = min(start + batch_size, n_samples)
        x0 = np.stack([seed_substream(cfg.seed, stream_tag, i)
                       .standard_normal((h, w, ch), dtype=np.float32)
                       for i in range(start, stop)])
        for cls in np.unique(labels[start:stop]):
            sel = np.nonzero(labels[start:stop] == cls)[0]
            eps_fn = sampler.model_eps_fn(model, int(cls), cfg.guidance)
            if cfg.method == "ancestral":
                rng = seed_substream(cfg.seed, stream_tag + "-steps",
                                     start * num_classes + int(cls))
                xs = sampler.ancestral_trajectory(eps_fn, sched, x0[sel], cfg, rng)
            else:
                xs = sampler.ode_trajectory(eps_fn, sched, x0[sel], cfg)
            images[start + sel] = np.clip(xs, -1.0, 1.0)
    return images


def fid_eval(model, sched, extractor: FeatureExtractor,
             reference: GaussianStats, n_samples: int,
             cfg: sampler.SamplerConfig, *, reference_fingerprint: str | None = None,
             batch_size: int = 128, metric_log=None, iteration=None) -> float:
    """Generate class-balanced samples, embed them, score against reference.

    Refuses to compare against statistics computed by a different extractor
    version. Appends (iteration, fid) to ``metric_log`` when given.
    """
    if n_samples < 2:
        raise DataError(f"need n_samples >= 2 for covariance, got {n_samples}")
    if reference_fingerprint is not None and reference_fingerprint != extractor.fingerprint:
        raise DataError("extractor fingerprint does not match reference statistics "
                        f"({reference_fingerprint} vs {extractor.fingerprint})")
    images = generate_for_fid(model, sched, cfg, n_samples,
                              model.config.num_classes, batch_size)
    stats = accumulate(GaussianStats.zero(extractor.dim), extractor.extract(images))
    value = frechet_distance(stats, reference)
    if metric_log is not None:
        metric_log.append(iteration, fid=value)
    return value
