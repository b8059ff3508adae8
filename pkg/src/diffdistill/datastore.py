"""Persistence and ingestion: dataset/checkpoint binary formats, run
configuration grammar, and the deterministic RNG substream derivation.

All binary layouts are little-endian and round-trip bit-exactly. Checkpoint
writes are atomic (write to a temp file in the same directory, then rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

DATASET_MAGIC = b"DDS1"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"DDCK"
CHECKPOINT_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sHIHHBHB")  # magic, ver, N, H, W, C, classes, enc


# ---------------------------------------------------------------------------
# RNG substreams


def seed_substream(root_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Collision-resistant RNG stream derived from (root seed, tag, index).

    Identical inputs always yield identical streams; distinct (tag, index)
    pairs yield independent streams. Used everywhere randomness is needed so
    parallel and serial execution draw the same numbers per item.
    """
    payload = b"%d\x00%s\x00%d" % (int(root_seed), tag.encode("utf-8"), int(index))
    digest = hashlib.blake2b(payload, digest_size=32).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# labeled image data


@dataclass
class LabeledImageBatch:
    """Pixel tensors in [-1, 1], channels-last, with integer class labels."""

    images: np.ndarray  # (B, H, W, C) float32
    labels: np.ndarray  # (B,) int64

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Dataset:
    """In-memory labeled image set with streaming batch access."""

    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one per image")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def batch(self, idx) -> LabeledImageBatch:
        return LabeledImageBatch(self.images[idx], self.labels[idx])

    def iter_batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(slice(start, start + batch_size))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()[:16]


def pixels_to_unit(raw: np.ndarray) -> np.ndarray:
    """Bytes 0..255 -> float32 in [-1, 1] via v / 127.5 - 1."""
    return (raw.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def unit_to_pixels(x: np.ndarray) -> np.ndarray:
    """Inverse mapping with round-to-nearest; exact on the byte lattice."""
    v = np.rint((x.astype(np.float64) + 1.0) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def write_dataset(ds: Dataset, path) -> None:
    n, h, w, c = ds.images.shape
    if ds.labels.max(initial=0) >= ds.num_classes or ds.labels.min(initial=0) < 0:
        raise DataError("labels out of range for declared class count")
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c,
                                  ds.num_classes, 0)
    pix = h * w * c
    body = np.empty((n, pix + 2), dtype=np.uint8)
    body[:, :pix] = unit_to_pixels(ds.images).reshape(n, pix)
    body[:, pix:] = ds.labels.astype("<u2").view(np.uint8).reshape(n, 2)
    _atomic_write(path, header + body.tobytes())


def read_dataset(path) -> Dataset:
    blob = _read_file(path)
    if len(blob) < _DATASET_HEADER.size:
        raise DataError(f"{path}: file shorter than dataset header")
    magic, ver, n, h, w, c, classes, enc = _DATASET_HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if ver != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {ver}")
    if enc != 0:
        raise DataError(f"{path}: unknown pixel encoding {enc}")
    if n < 1 or classes < 1 or h < 1 or w < 1 or c < 1:
        raise DataError(f"{path}: degenerate header (N={n}, {h}x{w}x{c}, C={classes})")
    item = h * w * c + 2
    expected = _DATASET_HEADER.size + n * item
    if len(blob) != expected:
        k = max(0, (len(blob) - _DATASET_HEADER.size)) // item
        if len(blob) < expected:
            raise DataError(f"{path}: truncated payload at item {k} "
                            f"({len(blob)} bytes, expected {expected})")
        raise DataError(f"{path}: trailing bytes beyond declared payload "
                        f"({len(blob)} bytes, expected {expected})")
    body = np.frombuffer(blob, dtype=np.uint8, offset=_DATASET_HEADER.size)
    body = body.reshape(n, item)
    raw = body[:, : h * w * c].reshape(n, h, w, c)
    labels = body[:, h * w * c:].copy().view("<u2").reshape(n).astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} >= class count {classes} "
                        f"at item {bad[0]}")
    return Dataset(images=pixels_to_unit(raw), labels=labels, num_classes=classes)


# ---------------------------------------------------------------------------
# external dataset import


@dataclass(frozen=True)
class RecordLayout:
    """Fixed-size record description for CIFAR-style binary sources.

    Each record is ``label_bytes`` label bytes followed by a pixel block of
    height*width*channels bytes. ``label_index`` selects which label byte to
    use. ``planar`` pixel order means all of channel 0, then channel 1, ...;
    otherwise pixels are interleaved channels-last.
    """

    height: int
    width: int
    channels: int
    num_classes: int
    label_bytes: int = 1
    label_index: int = 0
    planar: bool = True


def import_cifar_style(src_path, layout: RecordLayout, out_path) -> Dataset:
    """Convert a fixed-record binary source into the native dataset format."""
    blob = _read_file(src_path)
    pix = layout.height * layout.width * layout.channels
    rec = layout.label_bytes + pix
    if len(blob) == 0 or len(blob) % rec:
        raise DataError(f"{src_path}: size {len(blob)} is not a multiple of "
                        f"record size {rec}")
    n = len(blob) // rec
    body = np.frombuffer(blob, dtype=np.uint8).reshape(n, rec)
    labels = body[:, layout.label_index].astype(np.int64)
    if labels.max() >= layout.num_classes:
        raise DataError(f"{src_path}: label {labels.max()} >= declared class "
                        f"count {layout.num_classes}")
    raw = body[:, layout.label_bytes:]
    if layout.planar:
        raw = raw.reshape(n, layout.channels, layout.height, layout.width)
        raw = raw.transpose(0, 2, 3, 1)
    else:
        raw = raw.reshape(n, layout.height, layout.width, layout.channels)
    ds = Dataset(images=pixels_to_unit(np.ascontiguousarray(raw)),
                 labels=labels, num_classes=layout.num_classes)
    write_dataset(ds, out_path)
    return ds


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Named f32 tensor table plus training bookkeeping.

    ``kind`` distinguishes denoiser / classifier / extractor checkpoints;
    ``config`` echoes the producing configuration as a plain dict.
    """

    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict | None = None
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    opt_step: int | None = None
    ema: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.tensors)


def fingerprint_tensors(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _pack_section(section: dict[str, np.ndarray] | None):
    if section is None:
        return None, b""
    index = []
    blob = bytearray()
    for name in section:
        arr = np.ascontiguousarray(section[name], dtype="<f4")
        index.append([name, list(arr.shape)])
        blob += arr.tobytes()
    return index, bytes(blob)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    sections = {}
    blob = bytearray()
    for sec_name, sec in (("tensors", ckpt.tensors), ("opt_m", ckpt.opt_m),
                          ("opt_v", ckpt.opt_v), ("ema", ckpt.ema)):
        index, data = _pack_section(sec)
        if index is not None:
            sections[sec_name] = index
            blob += data
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "opt_step": ckpt.opt_step,
        "extra": ckpt.extra,
        "sections": sections,
    }
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(hj)) + hj + bytes(blob)
    _atomic_write(path, out)


def read_checkpoint(path) -> Checkpoint:
    blob = _read_file(path)
    head = len(CHECKPOINT_MAGIC) + 6
    if len(blob) < head:
        raise DataError(f"{path}: file shorter than checkpoint header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    ver, hlen = struct.unpack_from("<HI", blob, 4)
    if ver != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {ver}")
    if len(blob) < head + hlen:
        raise DataError(f"{path}: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(blob[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    offset = head + hlen
    parsed: dict[str, dict[str, np.ndarray]] = {}
    for sec_name, index in header.get("sections", {}).items():
        sec = {}
        for name, shape in index:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 4
            if offset + nbytes > len(blob):
                raise DataError(f"{path}: truncated tensor data at {sec_name}/{name}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            sec[name] = arr.reshape(shape).copy()
            offset += nbytes
        parsed[sec_name] = sec
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes beyond tensor data")
    names = list(parsed.get("tensors", {}))
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate tensor names")
    return Checkpoint(kind=header["kind"], config=header["config"],
                      tensors=parsed.get("tensors", {}),
                      iteration=header.get("iteration", 0),
                      rng_state=header.get("rng_state"),
                      opt_m=parsed.get("opt_m"), opt_v=parsed.get("opt_v"),
                      opt_step=header.get("opt_step"),
                      ema=parsed.get("ema"), extra=header.get("extra", {}))


# ---------------------------------------------------------------------------
# run configuration: flat "section.key = value" text


def _as_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


CONFIG_KEYS: dict[str, type | object] = {
    "schedule.kind": str, "schedule.steps": int,
    "schedule.beta_start": float, "schedule.beta_end": float,
    "model.preset": str, "model.layers": int, "model.hidden": int,
    "model.mlp": int, "model.heads": int, "model.patch": int,
    "model.skip_mode": str,
    "train.lr": float, "train.weight_decay": float,
    "train.beta1": float, "train.beta2": float,
    "train.batch_size": int, "train.iterations": int,
    "train.fid_every": int, "train.checkpoint_every": int,
    "train.seed": int, "train.ema": _as_bool, "train.ema_decay": float,
    "train.grad_accum": int, "train.uncond_prob": float,
    "sample.method": str, "sample.steps": int, "sample.variance": str,
    "sample.guidance": float, "sample.seed": int, "sample.order": int,
    "distill.ipc": int, "distill.budget_seconds": float,
    "distill.batch_size": int,
    "fid.n_samples": int, "fid.batch_size": int,
    "fid.extractor_seed": int, "fid.extractor_epochs": int,
    "fid.extractor_width": int,
    "classifier.blocks": int, "classifier.width": int,
    "classifier.epochs": int, "classifier.lr": float,
    "classifier.batch_size": int, "classifier.seeds": int,
    "classifier.augment": _as_bool, "classifier.weight_decay": float,
}

CONFIG_ENV_VAR = "DD_CONFIG"


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``section.key = value`` lines; unknown keys are errors."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        caster = CONFIG_KEYS[key]
        try:
            out[key] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path=None) -> dict:
    """Load a config file; falls back to $DD_CONFIG, then to empty."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


# ---------------------------------------------------------------------------
# io helpers


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            if os.path.exists(tmp):
                os.unlink(tmp)
        finally:
            pass
        raise DataError(f"cannot write {path}: {exc}") from exc
