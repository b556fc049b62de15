"""Spatial features enhancement block used on skip connections.

The block squeezes the input into channel descriptors (global max + average
pooling of a locally convolved map), refines them, gates them with a sigmoid
channel-attention vector derived from the raw input's global average, and adds
the result back onto the input:

    local      = ReLU(BN(conv3x3(x)))
    pooled     = concat(global_max(local), global_avg(local))   # (N, 2C, 1, 1)
    refined    = ReLU(BN(conv(pooled)))                         # (N, C, 1, 1)
    gate       = sigmoid(BN(conv1x1(global_avg(x))))            # (N, C, 1, 1)
    out        = x + refined * gate                             # broadcast over H, W

The pooled descriptors are 1x1 in space, so the refining convolution is the
center tap of the notional 3x3 filter, i.e. a 1x1 convolution. With all conv
weights zero the block is exactly the identity map.
"""

from __future__ import annotations

import numpy as np

from attnseg.nn import BatchNorm2d, Conv2d, Module
from attnseg.tensor import (
    Tensor,
    concat_channels,
    global_avg_pool,
    global_max_pool,
    relu,
    sigmoid,
)


class SpatialFeatureEnhancementBlock(Module):
    """Channel-gated residual enhancement; preserves (N, C, H, W)."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.channels = channels
        self.conv_local = Conv2d(channels, channels, 3, padding=1, bias=False, rng=rng)
        self.bn_local = BatchNorm2d(channels)
        self.conv_pool = Conv2d(2 * channels, channels, 1, bias=False, rng=rng)
        self.bn_pool = BatchNorm2d(channels)
        # gate conv keeps its bias: with frozen stats it shifts every coefficient
        self.conv_gate = Conv2d(channels, channels, 1, bias=True, rng=rng)
        self.bn_gate = BatchNorm2d(channels)
        # start with the gate mostly closed (sigmoid(-2) ~ 0.12) so the block
        # is near the identity at construction yet opens quickly in training
        self.bn_gate.bias.data[...] = -2.0

    def _refined_descriptor(self, x: Tensor) -> Tensor:
        local = relu(self.bn_local(self.conv_local(x)))
        pooled = concat_channels([global_max_pool(local), global_avg_pool(local)])
        return relu(self.bn_pool(self.conv_pool(pooled)))

    def attention_coefficients(self, x: Tensor) -> Tensor:
        """The sigmoid channel gate in (0, 1), shape (N, C, 1, 1)."""
        return sigmoid(self.bn_gate(self.conv_gate(global_avg_pool(x))))

    def forward(self, x: Tensor) -> Tensor:
        refined = self._refined_descriptor(x)
        gate = self.attention_coefficients(x)
        return x + refined * gate
