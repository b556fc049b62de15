"""Bottleneck attention: channel self-attention fused with spatial attention.

Two branches act on the bottleneck feature map F (N, c, h, w):

* TSA (transformer self-attention over channels): F is concatenated with a
  learnable position embedding, projected by three weight matrices into
  Q, K, V of shape (c, h*w) per sample, and attended with
  softmax(Q K^T / sqrt(d_k)) where d_k = h*w. The attention map is c x c
  and row-stochastic.
* GSA (global spatial attention): two half-width 1x1 embeddings form
  (h*w) x (h*w) spatial logits (scaled by 1/sqrt(c') when `scale_logits`),
  softmaxed row-wise and applied to a full-width 1x1 value embedding.

The branch outputs and the raw input are concatenated (3c channels) and fused
back to c channels by a 1x1 convolution.
"""

from __future__ import annotations

import numpy as np

from attnseg.nn import ConfigError, Conv2d, Module
from attnseg.tensor import (
    Tensor,
    broadcast_batch,
    concat_channels,
    matmul,
    reshape,
    softmax,
    swapaxes,
)


class TransformerAttentionModule(Module):
    """TSA + GSA fusion block; preserves the (N, c, h, w) bottleneck shape."""

    def __init__(self, channels: int, height: int, width: int, heads: int = 1,
                 scale_logits: bool = True, spatial_uses_position: bool = False,
                 rng=None):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"attention channel count must be even, got {channels}")
        if heads < 1 or channels % heads:
            raise ConfigError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.height = height
        self.width = width
        self.heads = heads
        self.scale_logits = scale_logits
        self.spatial_uses_position = spatial_uses_position
        gen = rng if rng is not None else np.random.default_rng()

        # channel-attention branch: projections consume the position-augmented
        # 2c-channel tensor and emit c rows of length h*w
        self.position = Tensor(np.zeros((channels, height, width)), requires_grad=True)
        std = np.sqrt(1.0 / (2 * channels))
        self.w_query = Tensor(gen.normal(0.0, std, (channels, 2 * channels)), requires_grad=True)
        self.w_key = Tensor(gen.normal(0.0, std, (channels, 2 * channels)), requires_grad=True)
        self.w_value = Tensor(gen.normal(0.0, std, (channels, 2 * channels)), requires_grad=True)

        spatial_in = 2 * channels if spatial_uses_position else channels
        half = channels // 2
        self.spatial_value = Conv2d(spatial_in, channels, 1, rng=gen)
        self.spatial_embed_a = Conv2d(spatial_in, half, 1, rng=gen)
        self.spatial_embed_b = Conv2d(spatial_in, half, 1, rng=gen)

        # fusion starts as a pass-through of the raw-input slice: the module
        # is the identity at construction and learns to mix attention in,
        # which keeps early training as stable as a plain bottleneck
        self.fuse = Conv2d(3 * channels, channels, 1, rng=gen)
        self.fuse.weight.data[...] = 0.0
        for i in range(channels):
            self.fuse.weight.data[i, 2 * channels + i, 0, 0] = 1.0

    # -- position encoding ---------------------------------------------------

    def add_position_encoding(self, f: Tensor) -> Tensor:
        """Concatenate the learnable position embedding onto the channels."""
        if f.shape[2:] != (self.height, self.width):
            raise ConfigError(
                f"position embedding is {self.height}x{self.width}, input is {f.shape[2:]}"
            )
        pe = broadcast_batch(self.position, f.shape[0])
        return concat_channels([f, pe])

    # -- channel self-attention ----------------------------------------------

    def _channel_attention(self, f: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = f.shape
        hw = h * w
        fp = reshape(self.add_position_encoding(f), (n, 2 * c, hw))
        q = matmul(self.w_query, fp)  # (n, c, hw)
        k = matmul(self.w_key, fp)
        v = matmul(self.w_value, fp)
        if self.heads > 1:
            ch = c // self.heads
            q = reshape(q, (n, self.heads, ch, hw))
            k = reshape(k, (n, self.heads, ch, hw))
            v = reshape(v, (n, self.heads, ch, hw))
        logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hw))
        attn = softmax(logits, axis=-1)
        out = matmul(attn, v)
        if self.heads > 1:
            out = reshape(out, (n, c, hw))
        return reshape(out, (n, c, h, w)), attn

    def tsa(self, f: Tensor) -> Tensor:
        return self._channel_attention(f)[0]

    def tsa_attention(self, f: Tensor) -> Tensor:
        """The c x c (or per-head) row-stochastic channel attention map."""
        return self._channel_attention(f)[1]

    # -- global spatial attention ---------------------------------------------

    def _spatial_attention(self, f: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = f.shape
        hw = h * w
        half = c // 2
        src = self.add_position_encoding(f) if self.spatial_uses_position else f
        a = swapaxes(reshape(self.spatial_embed_a(src), (n, half, hw)), 1, 2)  # (n, hw, c')
        b = reshape(self.spatial_embed_b(src), (n, half, hw))  # (n, c', hw)
        logits = matmul(a, b)
        if self.scale_logits:
            logits = logits * (1.0 / np.sqrt(half))
        attn = softmax(logits, axis=-1)  # (n, hw, hw)
        value = swapaxes(reshape(self.spatial_value(src), (n, c, hw)), 1, 2)  # (n, hw, c)
        out = swapaxes(matmul(attn, value), 1, 2)
        return reshape(out, (n, c, h, w)), attn

    def gsa(self, f: Tensor) -> Tensor:
        return self._spatial_attention(f)[0]

    def gsa_attention(self, f: Tensor) -> Tensor:
        """The (h*w) x (h*w) row-stochastic spatial attention map."""
        return self._spatial_attention(f)[1]

    # -- fusion ----------------------------------------------------------------

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ConfigError(f"expected (N, {self.channels}, h, w), got {f.shape}")
        tsa_out, _ = self._channel_attention(f)
        gsa_out, _ = self._spatial_attention(f)
        return self.fuse(concat_channels([tsa_out, gsa_out, f]))
