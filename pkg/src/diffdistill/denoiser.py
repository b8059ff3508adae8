"""Class-conditional noise-prediction network.

Patch-token transformer wrapped in a long-skip topology: the first half of
the blocks stash their outputs, the second half merge the matching stash back
in before running (innermost pairs first). Spatial resolution is constant
across blocks; the encoder/decoder structure lives entirely in the skip
wiring. Conditioning is token-based: the sequence layout is
``[time token, class token, image patch tokens]`` and every row receives a
learned positional embedding.

Parameters are a flat ``{name: ndarray}`` dict (see :func:`param_shapes`);
:func:`forward` supports an exact hand-written backward pass via
:func:`backward` for training and gradient verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import (gelu_bwd, gelu_fwd, layernorm_bwd, layernorm_fwd,
                      linear_bwd, linear_fwd, mhsa_bwd, mhsa_fwd)
from .kernels import attention  # re-export: single-matrix attention op  # noqa: F401

UNCONDITIONAL = -1

PRESETS = {
    "small": dict(layers=13, hidden=512, mlp=2048, heads=8),
    "mid": dict(layers=17, hidden=768, mlp=3072, heads=12),
    "tiny": dict(layers=5, hidden=128, mlp=384, heads=4),
}


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; validated at construction."""

    layers: int
    hidden: int
    mlp: int
    heads: int
    patch: int
    image_size: tuple[int, int]
    channels: int = 3
    num_classes: int = 10
    max_steps: int = 1000
    skip_mode: str = "add"  # "add" or "concat"

    def __post_init__(self):
        h, w = self.image_size
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.mlp < 1 or self.channels < 1 or self.num_classes < 1 or self.max_steps < 1:
            raise ValueError("mlp, channels, num_classes and max_steps must be positive")
        if self.skip_mode not in ("add", "concat"):
            raise ValueError(f"skip_mode must be 'add' or 'concat', got {self.skip_mode!r}")

    @property
    def n_patches(self) -> int:
        h, w = self.image_size
        return (h // self.patch) * (w // self.patch)

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def enc_blocks(self) -> int:
        return self.layers // 2

    @classmethod
    def preset(cls, name: str, image_size, channels=3, num_classes=10,
               max_steps=1000, patch=None, skip_mode="add") -> "DenoiserConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        if isinstance(image_size, int):
            image_size = (image_size, image_size)
        if patch is None:
            patch = 2 if image_size[0] <= 32 else 4
        return cls(patch=patch, image_size=tuple(image_size), channels=channels,
                   num_classes=num_classes, max_steps=max_steps,
                   skip_mode=skip_mode, **PRESETS[name])


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter tensors and their shapes, in canonical order."""
    D, m = cfg.hidden, cfg.mlp
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (cfg.patch_dim, D),
        "pos_embed": (cfg.n_tokens, D),
        "time_embed.w": (D, D),
        "time_embed.b": (D,),
        "class_embed": (cfg.num_classes + 1, D),  # last row: unconditional slot
    }
    for i in range(cfg.layers):
        p = f"block{i:02d}."
        shapes[p + "ln1.g"] = (D,)
        shapes[p + "ln1.b"] = (D,)
        shapes[p + "attn.w_qkv"] = (D, 3 * D)
        shapes[p + "attn.b_qkv"] = (3 * D,)
        shapes[p + "attn.w_out"] = (D, D)
        shapes[p + "attn.b_out"] = (D,)
        shapes[p + "ln2.g"] = (D,)
        shapes[p + "ln2.b"] = (D,)
        shapes[p + "mlp.w1"] = (D, m)
        shapes[p + "mlp.b1"] = (m,)
        shapes[p + "mlp.w2"] = (m, D)
        shapes[p + "mlp.b2"] = (D,)
    if cfg.skip_mode == "concat":
        for j in range(cfg.enc_blocks):
            shapes[f"skip{j:02d}.w"] = (2 * D, D)
            shapes[f"skip{j:02d}.b"] = (D,)
    shapes["head.w"] = (D, cfg.patch_dim)
    shapes["head.b"] = (cfg.patch_dim,)
    return shapes


def count_params(cfg: DenoiserConfig) -> int:
    """Closed-form scalar parameter count (cross-checked by enumeration in tests)."""
    D, m, pd = cfg.hidden, cfg.mlp, cfg.patch_dim
    n = pd * D                              # patch embedding
    n += cfg.n_tokens * D                   # positional table
    n += D * D + D                          # time projection
    n += (cfg.num_classes + 1) * D          # class table + unconditional slot
    n += cfg.layers * (4 * D * D + 2 * D * m + 9 * D + m)
    if cfg.skip_mode == "concat":
        n += cfg.enc_blocks * (2 * D * D + D)
    n += D * pd + pd                        # output head
    return n


def _trunc_normal(rng, shape, std, dtype):
    """Normal(0, std) truncated to +-2 std, by resampling."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_params(cfg: DenoiserConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) weights; zero biases, norms at identity,
    and a zero output head so the initial noise estimate is exactly 0."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head."):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith((".b", ".b_qkv", ".b_out", ".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith("ln1.g") or name.endswith("ln2.g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("ln1.b") or name.endswith("ln2.b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _trunc_normal(rng, shape, 0.02, dtype)
    return params


def audit_shapes(cfg: DenoiserConfig, params: dict) -> None:
    """Raise if the named tensors do not exactly match the config's shape map."""
    expected = param_shapes(cfg)
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


@dataclass(frozen=True)
class Denoiser:
    """A config plus its parameter tensors; the unit the sampler consumes."""

    config: DenoiserConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def predict(self, x_t, t, y):
        return predict_noise(self.config, self.params, x_t, t, y)


# ---------------------------------------------------------------------------
# patch <-> image


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split (..., H, W, C) into (..., n_patches, patch*patch*C), row-major scan."""
    image = np.asarray(image)
    *lead, H, W, C = image.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = image.reshape(*lead, gh, patch, gw, patch, C)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, C)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def unpatchify(tokens: np.ndarray, cfg: DenoiserConfig) -> np.ndarray:
    """Exact inverse of :func:`patchify` for this config's geometry."""
    tokens = np.asarray(tokens)
    H, W = cfg.image_size
    p, C = cfg.patch, cfg.channels
    gh, gw = H // p, W // p
    *lead, n, d = tokens.shape
    if n != gh * gw or d != p * p * C:
        raise ValueError(f"expected ({gh * gw}, {p * p * C}) token rows, got ({n}, {d})")
    x = tokens.reshape(*lead, gh, gw, p, p, C)
    x = np.moveaxis(x, -3, -4)  # (..., gh, p, gw, p, C)
    return x.reshape(*lead, H, W, C)


# ---------------------------------------------------------------------------
# embedding


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal step encoding: interleaved-free [sin | cos] halves, float64."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang[:, : dim - half])], axis=1)


def _check_conditioning(cfg, t, y):
    t = np.atleast_1d(np.asarray(t))
    y = np.atleast_1d(np.asarray(y))
    if t.min() < 1 or t.max() > cfg.max_steps:
        raise ValueError(f"step {t} out of range [1, {cfg.max_steps}]")
    if y.min() < UNCONDITIONAL or y.max() >= cfg.num_classes:
        raise ValueError(f"label {y} out of range [0, {cfg.num_classes}) "
                         f"(or {UNCONDITIONAL} for unconditional)")
    return t, y


def embed_fwd(cfg, params, patches, t, y):
    """Token sequence [time, class, patches @ E] + positional table.

    patches: (B, n_patches, patch_dim); t, y: (B,) with y == -1 meaning the
    unconditional slot.
    """
    t, y = _check_conditioning(cfg, t, y)
    B = patches.shape[0]
    dtype = params["patch_embed.w"].dtype
    tf = time_features(t, cfg.hidden).astype(dtype)
    time_tok, time_c = linear_fwd(tf, params["time_embed.w"], params["time_embed.b"])
    y_idx = np.where(y == UNCONDITIONAL, cfg.num_classes, y)
    class_tok = params["class_embed"][y_idx]
    img_tok, img_c = linear_fwd(patches, params["patch_embed.w"])
    z = np.empty((B, cfg.n_tokens, cfg.hidden), dtype=dtype)
    z[:, 0] = time_tok
    z[:, 1] = class_tok
    z[:, 2:] = img_tok
    z += params["pos_embed"]
    return z, (time_c, img_c, y_idx, cfg.num_classes + 1)


def embed_bwd(dz, cache):
    time_c, img_c, y_idx, n_slots = cache
    grads = {}
    _, grads["time_embed.w"], grads["time_embed.b"] = linear_bwd(dz[:, 0], time_c)
    dclass = np.zeros((n_slots, dz.shape[-1]), dtype=dz.dtype)
    np.add.at(dclass, y_idx, dz[:, 1])
    grads["class_embed"] = dclass
    dpatches, grads["patch_embed.w"], _ = linear_bwd(dz[:, 2:], img_c)
    grads["pos_embed"] = dz.sum(axis=0)
    return dpatches, grads


def embed(patches, t, y, params, cfg: DenoiserConfig) -> np.ndarray:
    """Public single-item embedding: (n_patches, patch_dim) -> (n_tokens, hidden)."""
    z, _ = embed_fwd(cfg, params, np.asarray(patches)[None], t, y)
    return z[0]


# ---------------------------------------------------------------------------
# transformer blocks and skip merging


def block_fwd(cfg, params, prefix, z):
    """Pre-norm residual block: z + MHSA(norm(z)), then + MLP(norm(.))."""
    n1, n1_c = layernorm_fwd(z, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    att, att_c = mhsa_fwd(n1, params[prefix + "attn.w_qkv"], params[prefix + "attn.b_qkv"],
                          params[prefix + "attn.w_out"], params[prefix + "attn.b_out"],
                          cfg.heads)
    h = z + att
    n2, n2_c = layernorm_fwd(h, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    m1, m1_c = linear_fwd(n2, params[prefix + "mlp.w1"], params[prefix + "mlp.b1"])
    act, act_c = gelu_fwd(m1)
    m2, m2_c = linear_fwd(act, params[prefix + "mlp.w2"], params[prefix + "mlp.b2"])
    return h + m2, (n1_c, att_c, n2_c, m1_c, act_c, m2_c)


def block_bwd(prefix, dout, cache):
    n1_c, att_c, n2_c, m1_c, act_c, m2_c = cache
    grads = {}
    dact, grads[prefix + "mlp.w2"], grads[prefix + "mlp.b2"] = linear_bwd(dout, m2_c)
    dm1 = gelu_bwd(dact, act_c)
    dn2, grads[prefix + "mlp.w1"], grads[prefix + "mlp.b1"] = linear_bwd(dm1, m1_c)
    dh, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = layernorm_bwd(dn2, n2_c)
    dh = dh + dout
    (dn1, grads[prefix + "attn.w_qkv"], grads[prefix + "attn.b_qkv"],
     grads[prefix + "attn.w_out"], grads[prefix + "attn.b_out"]) = mhsa_bwd(dh, att_c)
    dz_from_norm, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = layernorm_bwd(dn1, n1_c)
    return dz_from_norm + dh, grads


def transformer_block(z, params, cfg: DenoiserConfig, index: int = 0) -> np.ndarray:
    """Public single-sequence form of one block; z: (n_tokens, hidden)."""
    out, _ = block_fwd(cfg, params, f"block{index:02d}.", np.asarray(z)[None])
    return out[0]


def skip_merge_fwd(cfg, params, j, deep, shallow):
    if deep.shape != shallow.shape:
        raise ValueError(f"skip shape mismatch: {deep.shape} vs {shallow.shape}")
    if cfg.skip_mode == "add":
        return deep + shallow, None
    cat = np.concatenate([deep, shallow], axis=-1)
    out, lin_c = linear_fwd(cat, params[f"skip{j:02d}.w"], params[f"skip{j:02d}.b"])
    return out, lin_c


def skip_merge_bwd(cfg, j, dout, cache):
    if cfg.skip_mode == "add":
        return dout, dout, {}
    D = dout.shape[-1]
    dcat, dw, db = linear_bwd(dout, cache)
    return dcat[..., :D], dcat[..., D:], {f"skip{j:02d}.w": dw, f"skip{j:02d}.b": db}


def skip_merge(deep, shallow, cfg: DenoiserConfig, params=None, index: int = 0) -> np.ndarray:
    """Public skip combine: addition by default, linear(concat) in concat mode."""
    out, _ = skip_merge_fwd(cfg, params or {}, index,
                            np.asarray(deep), np.asarray(shallow))
    return out


# ---------------------------------------------------------------------------
# full network


def forward(cfg, params, x, t, y, want_cache=False):
    """Noise estimate for a batch. x: (B, H, W, C); t, y: (B,) or scalars.

    Topology: embed -> enc blocks (stashing outputs) -> middle block ->
    dec blocks, each preceded by a skip merge with the matching stash
    (innermost encoder output first) -> strip time/class tokens -> output
    head -> unpatchify.
    """
    H, W = cfg.image_size
    if x.shape[1:] != (H, W, cfg.channels):
        raise ValueError(f"expected images of shape (B, {H}, {W}, {cfg.channels}), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (B,))
    y = np.broadcast_to(np.atleast_1d(np.asarray(y)), (B,))
    patches = patchify(x, cfg.patch)
    z, emb_c = embed_fwd(cfg, params, patches, t, y)

    e = cfg.enc_blocks
    stash, block_caches, skip_caches = [], [], []
    for i in range(e):
        z, c = block_fwd(cfg, params, f"block{i:02d}.", z)
        block_caches.append(c)
        stash.append(z)
    z, c = block_fwd(cfg, params, f"block{e:02d}.", z)
    block_caches.append(c)
    for j in range(cfg.layers - e - 1):
        z, sc = skip_merge_fwd(cfg, params, j, z, stash[e - 1 - j])
        skip_caches.append(sc)
        z, c = block_fwd(cfg, params, f"block{e + 1 + j:02d}.", z)
        block_caches.append(c)

    img_tokens = z[:, 2:]
    head, head_c = linear_fwd(img_tokens, params["head.w"], params["head.b"])
    eps = unpatchify(head, cfg)
    if not want_cache:
        return eps, None
    return eps, (emb_c, block_caches, skip_caches, head_c)


def backward(cfg, params, cache, d_eps):
    """Exact gradients of :func:`forward` w.r.t. all parameters and the input.

    Returns ``(grads, d_x)`` where grads has one entry per named tensor.
    """
    emb_c, block_caches, skip_caches, head_c = cache
    grads = {name: np.zeros_like(p) for name, p in params.items()}

    def absorb(g):
        for k, v in g.items():
            grads[k] += v

    dhead = patchify(d_eps, cfg.patch)
    dimg, grads["head.w"], grads["head.b"] = linear_bwd(dhead, head_c)
    dz = np.zeros((d_eps.shape[0], cfg.n_tokens, cfg.hidden), dtype=d_eps.dtype)
    dz[:, 2:] = dimg

    e = cfg.enc_blocks
    dstash = [None] * e
    for j in range(cfg.layers - e - 2, -1, -1):
        dz, g = block_bwd(f"block{e + 1 + j:02d}.", dz, block_caches[e + 1 + j])
        absorb(g)
        dz, dshallow, g = skip_merge_bwd(cfg, j, dz, skip_caches[j])
        absorb(g)
        k = e - 1 - j
        dstash[k] = dshallow if dstash[k] is None else dstash[k] + dshallow
    dz, g = block_bwd(f"block{e:02d}.", dz, block_caches[e])
    absorb(g)
    for i in range(e - 1, -1, -1):
        if dstash[i] is not None:
            dz = dz + dstash[i]
        dz, g = block_bwd(f"block{i:02d}.", dz, block_caches[i])
        absorb(g)

    dpatches, g = embed_bwd(dz, emb_c)
    absorb(g)
    d_x = unpatchify(dpatches, cfg)
    return grads, d_x


def predict_noise(cfg: DenoiserConfig, params: dict, x_t, t, y) -> np.ndarray:
    """Deterministic noise estimate at the shape of x_t.

    Accepts a single image (H, W, C) with scalar t/y, or a batch
    (B, H, W, C) with per-item vectors.
    """
    x_t = np.asarray(x_t)
    single = x_t.ndim == 3
    xb = x_t[None] if single else x_t
    eps, _ = forward(cfg, params, xb, t, y)
    return eps[0] if single else eps
