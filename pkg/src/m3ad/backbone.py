"""Hierarchical vision backbone.

Four stages connected by 2x2 patch merging, so channels run C, 2C, 4C, 8C
while the token grid runs /4, /8, /16, /32 of the input. Stages 0 and 1
mix tokens with shifted-window scaled-cosine attention; stages 2 and 3
use the tokenized-MLP mixer from :mod:`m3ad.tokmlp`. Every block is
pre-norm residual with a mixture-of-experts layer in place of the usual
feed-forward:

    z1 = Mixer(LN(z)) + z
    z2 = MMoE(LN(z1)) + z1

Attention windows adapt to the map: the effective window is
gcd(H, W, window), which always tiles the grid, collapses to the whole
map when the map is small, and keeps lookups inside the one relative
position bias table sized for the configured window. Shift alternates
between 0 and half the effective window on consecutive blocks and is
implemented as a cyclic roll (no attention masking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ModelConfig
from .errors import ShapeError
from .numerics import LayerNorm, Linear, Module, Tensor

STAGES = 4
ATTENTION_STAGES = (0, 1)

# raw value whose softplus is 0.99, so temperatures start at 1.0
_TAU_RAW_INIT = math.log(math.expm1(0.99))


@dataclass(frozen=True)
class StagePlan:
    """Resolved per-stage geometry for one input extent."""

    dims: tuple[int, ...]
    depths: tuple[int, ...]
    grids: tuple[tuple[int, int], ...]
    kinds: tuple[str, ...]


def build_stage_plan(cfg: ModelConfig, image_hw: tuple[int, int]) -> StagePlan:
    h, w = image_hw
    step = cfg.patch_size * (1 << (STAGES - 1))
    if h % step or w % step:
        raise ShapeError(f"image extents {h}x{w} must be divisible by {step}")
    dims = tuple(cfg.stage_dim(s) for s in range(STAGES))
    grids = tuple((h // (cfg.patch_size << s), w // (cfg.patch_size << s))
                  for s in range(STAGES))
    kinds = tuple("attention" if s in ATTENTION_STAGES else "tokmlp"
                  for s in range(STAGES))
    return StagePlan(dims=dims, depths=tuple(cfg.depths), grids=grids, kinds=kinds)


def effective_window(h: int, w: int, window: int) -> int:
    """Largest window that tiles an h x w grid without exceeding ``window``."""
    return math.gcd(math.gcd(h, w), window)


def window_partition(x: Tensor, m: int) -> Tensor:
    """(B, H, W, C) -> (B*nH*nW, m*m, C). H and W must be multiples of m."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"grid {h}x{w} is not tiled by window {m}")
    x = nm.reshape(x, (b, h // m, m, w // m, m, c))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    return nm.reshape(x, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, b: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    x = nm.reshape(windows, (b, h // m, w // m, m, m, c))
    x = nm.transpose(x, (0, 1, 3, 2, 4, 5))
    return nm.reshape(x, (b, h, w, c))


def relative_position_index(m: int, table_window: int) -> np.ndarray:
    """Flat bias-table row index for every (query, key) pair in an m x m
    window. The table is laid out for ``table_window``; any m up to that
    size indexes a centered sub-block of it."""
    if m > table_window:
        raise ShapeError(f"window {m} exceeds bias table extent {table_window}")
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"), axis=0)
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]  # (2, m*m, m*m), each in [-(m-1), m-1]
    rel = rel + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


class PatchEmbed(Module):
    """Non-overlapping patch projection plus layer norm."""

    def __init__(self, rng: np.random.Generator, patch: int, embed_dim: int, dtype):
        self.proj = Linear(rng, patch * patch, embed_dim, dtype)
        self.norm = LayerNorm(embed_dim, dtype)
        self.patch = patch

    def __call__(self, images: Tensor) -> Tensor:
        b, h, w = images.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image extents {h}x{w} not divisible by patch {p}")
        x = nm.reshape(images, (b, h // p, p, w // p, p))
        x = nm.transpose(x, (0, 1, 3, 2, 4))
        x = nm.reshape(x, (b, h // p, w // p, p * p))
        return self.norm(self.proj(x))


class PatchMerge(Module):
    """2x2 neighborhood concat followed by a bias-free channel reduction."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype):
        self.reduce = Linear(rng, 4 * dim, 2 * dim, dtype, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[1], x.shape[2]
        if h % 2 or w % 2:
            raise ShapeError(f"grid {h}x{w} not divisible by 2 for merging")
        quads = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :],
                 x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        return self.reduce(nm.concat(quads, axis=-1))


class WindowAttention(Module):
    """Scaled cosine attention inside windows.

    Scores are cos(q, k) / tau + B with a learnable per-head temperature
    tau = 0.01 + softplus(raw), floored strictly above 0.01, and a
    relative position bias B looked up from a zero-initialized table.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, window: int, dtype):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.qkv = Linear(rng, dim, 3 * dim, dtype)
        self.proj = Linear(rng, dim, dim, dtype)
        self.tau_raw = nm.full_param((heads,), _TAU_RAW_INIT, dtype)
        self.bias_table = nm.zeros_param(((2 * window - 1) ** 2, heads), dtype)
        self.heads = heads
        self.window = window
        self._index_cache: dict[int, np.ndarray] = {}

    @property
    def tau(self) -> np.ndarray:
        return 0.01 + np.logaddexp(0.0, self.tau_raw.data.astype(np.float64))

    def _rel_index(self, m: int) -> np.ndarray:
        cached = self._index_cache.get(m)
        if cached is None:
            cached = relative_position_index(m, self.window).reshape(-1)
            self._index_cache[m] = cached
        return cached

    def __call__(self, windows: Tensor, m: int) -> Tensor:
        bw, t, c = windows.shape
        if t != m * m:
            raise ShapeError(f"{t} tokens do not fill a {m}x{m} window")
        hd = c // self.heads
        qkv = nm.reshape(self.qkv(windows), (bw, t, 3, self.heads, hd))
        qkv = nm.transpose(qkv, (2, 0, 3, 1, 4))  # (3, bw, heads, t, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]

        qn = nm.div(q, nm.clamp_min(nm.sqrt(nm.tsum(nm.mul(q, q), axis=-1, keepdims=True)), 1e-12))
        kn = nm.div(k, nm.clamp_min(nm.sqrt(nm.tsum(nm.mul(k, k), axis=-1, keepdims=True)), 1e-12))
        cossim = nm.matmul(qn, nm.transpose(kn, (0, 1, 3, 2)))  # (bw, heads, t, t)

        tau = nm.add(nm.softplus(self.tau_raw), 0.01)
        scores = nm.div(cossim, nm.reshape(tau, (1, self.heads, 1, 1)))

        bias = nm.take(self.bias_table, self._rel_index(m))  # (t*t, heads)
        bias = nm.transpose(nm.reshape(bias, (t, t, self.heads)), (2, 0, 1))
        attn = nm.softmax(nm.add(scores, bias), axis=-1)

        out = nm.matmul(attn, v)  # (bw, heads, t, hd)
        out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (bw, t, c))
        return self.proj(out)


class M3ADBlock(Module):
    """Pre-norm residual block: token mixer then mixture-of-experts."""

    def __init__(self, mixer: Module, moe: Module, dim: int, dtype,
                 shifted: bool, window: int):
        self.norm1 = LayerNorm(dim, dtype)
        self.mixer = mixer
        self.norm2 = LayerNorm(dim, dtype)
        self.moe = moe
        self.shifted = shifted
        self.window = window

    def _mix(self, x: Tensor) -> Tensor:
        if not isinstance(self.mixer, WindowAttention):
            return self.mixer(x)
        b, h, w, _ = x.shape
        m = effective_window(h, w, self.window)
        shift = m // 2 if self.shifted and (h > m or w > m) else 0
        if shift:
            x = nm.roll(x, (-shift, -shift), axis=(1, 2))
        out = window_reverse(self.mixer(window_partition(x, m), m), m, b, h, w)
        if shift:
            out = nm.roll(out, (shift, shift), axis=(1, 2))
        return out

    def __call__(self, x: Tensor, routing) -> Tensor:
        x = nm.add(self._mix(self.norm1(x)), x)
        b, h, w, c = x.shape
        tokens = nm.reshape(self.norm2(x), (b, h * w, c))
        moe_out = nm.reshape(self.moe(tokens, routing), (b, h, w, c))
        return nm.add(moe_out, x)
