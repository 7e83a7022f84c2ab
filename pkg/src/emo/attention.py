"""Window partitioning and the expanded-window attention core.

Maps are tiled into non-overlapping w x w windows (bottom/right zero-padded
to a multiple of w); attention runs per window, per head. Padded key slots
are masked out of the softmax, so attention rows always sum to 1 over real
positions - this is what makes the pre-/post-expansion multiplication orders
agree exactly (biases included) on every map shape, not just divisible ones.

All functions go through the autograd wrappers, so they work on plain arrays
and on tape Vars alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as T

MASK_NEG = -1e30


@dataclass(frozen=True)
class WindowLayout:
    """Geometry of one partition: grid of windows covering a padded map."""

    height: int
    width: int
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")

    @property
    def grid_h(self) -> int:
        return math.ceil(self.height / self.window)

    @property
    def grid_w(self) -> int:
        return math.ceil(self.width / self.window)

    @property
    def pad_h(self) -> int:
        return self.grid_h * self.window - self.height

    @property
    def pad_w(self) -> int:
        return self.grid_w * self.window - self.width

    @property
    def num_windows(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def tokens_per_window(self) -> int:
        return self.window * self.window

    def padding_slots(self) -> np.ndarray:
        """Boolean (num_windows, l): True where a token slot is padding."""
        w = self.window
        rows = np.arange(self.grid_h * w)
        cols = np.arange(self.grid_w * w)
        pad = (rows[:, None] >= self.height) | (cols[None, :] >= self.width)
        pad = pad.reshape(self.grid_h, w, self.grid_w, w).transpose(0, 2, 1, 3)
        return pad.reshape(self.num_windows, w * w)


def window_partition(x, window: int):
    """(N, C, H, W) -> tokens (N * num_windows, l, C) plus the layout."""
    n, c, h, wd = T.val(x).shape
    layout = WindowLayout(h, wd, window)
    w = layout.window
    xp = T.pad_hw_bottom_right(x, layout.pad_h, layout.pad_w)
    t = T.reshape(xp, (n, c, layout.grid_h, w, layout.grid_w, w))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))  # (N, gh, gw, w, w, C)
    return T.reshape(t, (n * layout.num_windows, w * w, c)), layout


def window_merge(tokens, layout: WindowLayout, batch: int):
    """Inverse of window_partition; strips the padding."""
    w = layout.window
    c = T.val(tokens).shape[-1]
    t = T.reshape(tokens, (batch, layout.grid_h, layout.grid_w, w, w, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))  # (N, C, gh, w, gw, w)
    t = T.reshape(t, (batch, c, layout.grid_h * w, layout.grid_w * w))
    return T.crop_hw(t, layout.height, layout.width)


def key_padding_bias(layout: WindowLayout, batch: int, dtype) -> np.ndarray | None:
    """Additive logit bias (N*nW, 1, 1, l) that removes padded keys, or None."""
    if layout.pad_h == 0 and layout.pad_w == 0:
        return None
    pad = layout.padding_slots()
    bias = np.where(pad, MASK_NEG, 0.0).astype(dtype)
    bias = np.tile(bias[None], (batch, 1, 1))
    return bias.reshape(batch * layout.num_windows, 1, 1, layout.tokens_per_window)


def split_heads(tokens, heads: int):
    """(B, l, C) -> (B, heads, l, C/heads); contiguous channel blocks per head."""
    b, l, c = T.val(tokens).shape
    if c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")
    t = T.reshape(tokens, (b, l, heads, c // heads))
    return T.transpose(t, (0, 2, 1, 3))


def merge_heads(per_head):
    b, h, l, d = T.val(per_head).shape
    return T.reshape(T.transpose(per_head, (0, 2, 1, 3)), (b, l, h * d))


def attention_weights(q_tokens, k_tokens, heads: int, key_bias=None):
    """Per-window softmax attention from query/key tokens.

    Logits are scaled by 1/sqrt(head_dim of Q/K); padded keys (key_bias)
    are pushed to -inf before the softmax.
    """
    c = T.val(q_tokens).shape[-1]
    scale = 1.0 / math.sqrt(c // heads)
    qh = split_heads(q_tokens, heads)
    kh = split_heads(k_tokens, heads)
    logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), scale)
    if key_bias is not None:
        logits = T.add(logits, key_bias)
    return T.softmax_lastdim(logits)


def mix_values(attn, v_tokens, heads: int):
    """Apply the attention matrix to value tokens, head block by head block."""
    vh = split_heads(v_tokens, heads)
    return merge_heads(T.matmul(attn, vh))
