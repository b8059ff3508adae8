"""Assembly of the distilled dataset: class-balanced generation under a
per-class (IPC) or wall-clock budget, with a full provenance manifest.

Labels follow a round-robin stream 0..C-1 repeating, and output is always a
prefix of that stream, so per-class counts can never differ by more than
one regardless of where a wall-clock budget truncates.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import sampler
from .datastore import Dataset, fingerprint_tensors, write_dataset
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Budget:
    """Exactly one of: images-per-class, or a wall-clock allowance."""

    mode: str  # "ipc" | "wall-clock"
    ipc: int = 0
    seconds: float = 0.0

    def __post_init__(self):
        if self.mode == "ipc":
            if self.ipc < 1:
                raise ConfigError(f"ipc budget must be >= 1, got {self.ipc}")
            if self.seconds:
                raise ConfigError("ipc budget must not also set seconds")
        elif self.mode == "wall-clock":
            if self.seconds <= 0:
                raise ConfigError(f"wall-clock budget must be positive, got {self.seconds}")
            if self.ipc:
                raise ConfigError("wall-clock budget must not also set ipc")
        else:
            raise ConfigError(f"budget mode must be 'ipc' or 'wall-clock', got {self.mode!r}")


@dataclass
class DistilledDataset:
    """Synthetic labeled images plus the manifest describing how they were made."""

    images: np.ndarray
    labels: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    def per_class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    def fingerprint(self) -> str:
        return self.manifest.get("fingerprint", "unknown")

    def to_dataset(self, num_classes: int) -> Dataset:
        return Dataset(images=self.images, labels=self.labels,
                       num_classes=num_classes)

    def save(self, path, num_classes: int) -> None:
        """Write the native dataset file plus a plain-text manifest sidecar."""
        write_dataset(self.to_dataset(num_classes), path)
        lines = []
        for key in sorted(self.manifest):
            value = self.manifest[key]
            if isinstance(value, (list, tuple, np.ndarray)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        with open(f"{os.fspath(path)}.manifest.txt", "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")


def _manifest_fingerprint(ckpt_fp: str, cfg: sampler.SamplerConfig) -> str:
    import hashlib
    h = hashlib.sha256(f"{ckpt_fp}|{cfg}".encode())
    return h.hexdigest()[:16]


def distill(model, sched, cfg: sampler.SamplerConfig, budget: Budget,
            *, gen_batch: int = 32, workers: int = 1) -> DistilledDataset:
    """Generate the distilled set under the given budget.

    IPC mode emits exactly C * ipc images. Wall-clock mode keeps generating
    round-robin chunks while elapsed time is under the allowance, so the run
    never exceeds ``seconds`` plus one chunk latency; if not even the first
    chunk fits, that is an explicit error rather than a silent empty set.
    """
    C = model.config.num_classes
    ckpt_fp = fingerprint_tensors(model.params)
    t_start = time.perf_counter()
    chunks = []
    produced = 0

    def next_chunk(count):
        nonlocal produced
        labels = (np.arange(produced, produced + count) % C).astype(np.int64)
        batch = sampler.sample_class_batch(model, sched, labels, cfg,
                                           workers=workers,
                                           index_offset=produced,
                                           stream_tag="distill")
        produced += count
        chunks.append(batch)

    if budget.mode == "ipc":
        total = C * budget.ipc
        while produced < total:
            next_chunk(min(gen_batch, total - produced))
    else:
        while time.perf_counter() - t_start < budget.seconds:
            next_chunk(gen_batch)
        if not chunks:
            raise DataError(
                f"wall-clock budget {budget.seconds}s produced no images "
                f"(first chunk did not start in time); nothing to distill")

    wall = time.perf_counter() - t_start
    images = np.concatenate([c.images for c in chunks])
    labels = np.concatenate([c.labels for c in chunks])
    manifest = {
        "checkpoint_fingerprint": ckpt_fp,
        "sampler.method": cfg.method,
        "sampler.steps": cfg.steps,
        "sampler.variance": cfg.variance,
        "sampler.guidance": cfg.guidance,
        "sampler.order": cfg.order,
        "seed": cfg.seed,
        "budget.mode": budget.mode,
        "budget.ipc": budget.ipc,
        "budget.seconds": budget.seconds,
        "wall_seconds": round(wall, 3),           # wall-clock field: not reproducible
        "images_per_second": round(len(labels) / wall, 3) if wall > 0 else 0.0,
        "per_class_counts": np.bincount(labels, minlength=C).tolist(),
        "fingerprint": _manifest_fingerprint(ckpt_fp, cfg),
    }
    return DistilledDataset(images=images, labels=labels, manifest=manifest)


# ---------------------------------------------------------------------------
# results ledger

LEDGER_COLUMNS = ("size", "accuracy", "fingerprint", "repeat")


def risk_proxy(distilled: DistilledDataset, accuracy: float,
               ledger_path) -> dict:
    """Record (|S|, test accuracy, fingerprint) in the results ledger.

    Entries with a fingerprint already present are retained and flagged as
    repeat runs. Returns the appended entry.
    """
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    fp = distilled.fingerprint()
    existing = read_ledger(ledger_path) if os.path.exists(ledger_path) else []
    repeat = any(row["fingerprint"] == fp for row in existing)
    entry = {"size": len(distilled), "accuracy": accuracy,
             "fingerprint": fp, "repeat": int(repeat)}
    new_file = not os.path.exists(ledger_path)
    with open(ledger_path, "a", newline="") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(LEDGER_COLUMNS)
        w.writerow([entry[c] for c in LEDGER_COLUMNS])
    return entry


def read_ledger(ledger_path) -> list[dict]:
    with open(ledger_path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["size"] = int(row["size"])
        row["accuracy"] = float(row["accuracy"])
        row["repeat"] = int(row.get("repeat", 0))
    return rows


def ledger_by_size(rows: list[dict]) -> list[dict]:
    """Size-sorted view used for the size-vs-performance presentation."""
    return sorted(rows, key=lambda r: (r["size"], r["accuracy"]))
