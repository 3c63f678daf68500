"""Tokenized-MLP mixer used by the two deepest backbone stages.

The block shifts channel groups along one spatial axis, tokenizes with a
3x3 convolution, and mixes through small per-token MLPs and a depthwise
convolution. Width and height passes share a single tokenizer:

    T_W = Tokenize(Shift_W(X))
    Y   = f(DWConv(MLP(T_W)))
    T_H = Tokenize(Shift_H(Y))
    Z   = f(LN(T_W + MLP(f(T_H))))        with f = GELU

Channels split into one group per shift offset; the default offsets
(-2..2) give five groups, split as evenly as the channel count allows.
Shifts are cyclic rolls, so no positions are lost at the borders.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .numerics import LayerNorm, Linear, Module, Tensor, parameter, zeros_param

DEFAULT_OFFSETS = (-2, -1, 0, 1, 2)


def axis_shift(x: Tensor, axis: int, offsets: tuple[int, ...]) -> Tensor:
    """Roll channel groups of a (B, H, W, C) grid along one spatial axis.

    Channels are split into ``len(offsets)`` contiguous groups (as evenly
    as possible, leading groups larger) and group i rolls by offsets[i].
    """
    if x.ndim != 4:
        raise ShapeError(f"axis_shift expects (B, H, W, C), got {x.shape}")
    if axis not in (1, 2):
        raise ShapeError(f"axis must be a spatial axis (1 or 2), got {axis}")
    c = x.shape[-1]
    bounds = np.cumsum([0] + [len(part) for part in np.array_split(np.arange(c), len(offsets))])
    pieces = []
    for i, off in enumerate(offsets):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        if lo == hi:
            continue
        piece = x[..., lo:hi]
        pieces.append(nm.roll(piece, (off,), axis=(axis,)) if off else piece)
    return nm.concat(pieces, axis=-1)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with zero padding 1 on a (B, H, W, Cin) grid.

    ``weight`` is (3, 3, Cin, Cout). Written as nine shifted matmuls so
    the gradient comes from the engine's primitives.
    """
    h, w = x.shape[1], x.shape[2]
    xp = nm.pad2d(nm.transpose(x, (0, 3, 1, 2)), 1, 1, 1, 1)  # (B, Cin, H+2, W+2)
    xp = nm.transpose(xp, (0, 2, 3, 1))
    out = None
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + h, dx:dx + w, :]
            term = nm.matmul(nm.reshape(patch, (-1, x.shape[-1])), weight[dy, dx])
            out = term if out is None else nm.add(out, term)
    out = nm.add(out, bias)
    return nm.reshape(out, (x.shape[0], h, w, weight.shape[-1]))


def dwconv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise 3x3 convolution, zero padding 1; ``weight`` is (3, 3, C)."""
    h, w = x.shape[1], x.shape[2]
    xp = nm.pad2d(nm.transpose(x, (0, 3, 1, 2)), 1, 1, 1, 1)
    xp = nm.transpose(xp, (0, 2, 3, 1))
    out = None
    for dy in range(3):
        for dx in range(3):
            term = nm.mul(xp[:, dy:dy + h, dx:dx + w, :], weight[dy, dx])
            out = term if out is None else nm.add(out, term)
    return nm.add(out, bias)


class TokMLPBlock(Module):
    """Shift, tokenize and mix one (B, H, W, C) feature grid."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype,
                 offsets: tuple[int, ...] = DEFAULT_OFFSETS):
        self.tok_weight = parameter(rng, (3, 3, dim, dim), dtype)
        self.tok_bias = zeros_param((dim,), dtype)
        self.mlp_w = Linear(rng, dim, dim, dtype)
        self.dw_weight = parameter(rng, (3, 3, dim), dtype)
        self.dw_bias = zeros_param((dim,), dtype)
        self.mlp_h = Linear(rng, dim, dim, dtype)
        self.norm = LayerNorm(dim, dtype)
        self.offsets = tuple(offsets)

    def tokenize(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.tok_weight, self.tok_bias)

    def tokens_w(self, x: Tensor) -> Tensor:
        """First tokenization (width-shifted path); exposed for testing."""
        return self.tokenize(axis_shift(x, axis=2, offsets=self.offsets))

    def __call__(self, x: Tensor) -> Tensor:
        tw = self.tokens_w(x)
        y = nm.gelu(dwconv3x3(self.mlp_w(tw), self.dw_weight, self.dw_bias))
        th = self.tokenize(axis_shift(y, axis=1, offsets=self.offsets))
        return nm.gelu(self.norm(nm.add(tw, self.mlp_h(nm.gelu(th)))))
