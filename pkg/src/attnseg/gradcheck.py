"""Block-level finite-difference gradient verification harness.

Each named block is built at a small size with seeded random weights and
inputs, batch-norm statistics are populated by one training-mode forward,
and the gradient of a scalar head (sigmoid-sum, or the combined loss for the
full model) is checked coordinate-by-coordinate against central differences
in eval mode. Large tensors are subsampled to keep a full sweep of all blocks
under a few seconds per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attnseg.attention import TransformerAttentionModule
from attnseg.losses import combined_loss
from attnseg.model import ModelConfig, build_model
from attnseg.nn import ConvBnRelu, DenseBlock, DenseBlockConfig, Transition
from attnseg.sfeb import SpatialFeatureEnhancementBlock
from attnseg.tensor import GradCheckResult, Tensor, finite_diff_grad_check, no_grad

BLOCK_NAMES = (
    "conv_bn_relu",
    "dense_block",
    "transition",
    "tsa",
    "gsa",
    "tam_fusion",
    "sfeb",
    "full_model",
)


@dataclass
class BlockCheck:
    block: str
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.max_rel_error < 1e-4


def _scalar_head(module, x: Tensor):
    def f():
        return module(x).sigmoid().sum()

    return f


def _warm_stats(module, x: Tensor) -> None:
    module.train()
    with no_grad():
        module(x)
    module.eval()


def check_block(name: str, seed: int = 0, eps: float = 1e-4,
                max_coords: int | None = 200) -> BlockCheck:
    """Gradient-check one named block at a small size; see BLOCK_NAMES."""
    rng = np.random.default_rng(seed)
    sampler = np.random.default_rng(seed + 1)

    if name == "conv_bn_relu":
        block = ConvBnRelu(3, 4, rng=rng)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        _warm_stats(block, x)
        f, wrt = _scalar_head(block, x), [x] + block.parameters()
    elif name == "dense_block":
        block = DenseBlock(4, DenseBlockConfig(2, 4, bn_size=2), rng=rng)
        x = Tensor(rng.normal(size=(2, 4, 6, 6)), requires_grad=True)
        _warm_stats(block, x)
        f, wrt = _scalar_head(block, x), [x] + block.parameters()
    elif name == "transition":
        block = Transition(6, 0.5, rng=rng)
        x = Tensor(rng.normal(size=(2, 6, 6, 6)), requires_grad=True)
        _warm_stats(block, x)
        f, wrt = _scalar_head(block, x), [x] + block.parameters()
    elif name in ("tsa", "gsa", "tam_fusion"):
        block = TransformerAttentionModule(6, 3, 3, rng=rng)
        block.position.data[...] = rng.normal(size=block.position.shape) * 0.1
        x = Tensor(rng.normal(size=(2, 6, 3, 3)), requires_grad=True)
        fn = {"tsa": block.tsa, "gsa": block.gsa, "tam_fusion": block}[name]

        def f():
            return fn(x).sigmoid().sum()

        wrt = [x] + block.parameters()
    elif name == "sfeb":
        block = SpatialFeatureEnhancementBlock(3, rng=rng)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        _warm_stats(block, x)
        f, wrt = _scalar_head(block, x), [x] + block.parameters()
    elif name == "full_model":
        model = build_model(ModelConfig(preset="tiny", input_size=32, seed=seed))
        x = Tensor(rng.uniform(size=(1, 1, 32, 32)), requires_grad=True)
        target = Tensor((rng.uniform(size=(1, 1, 32, 32)) > 0.7).astype(np.float64))
        _warm_stats(model, x)

        def f():
            return combined_loss(model(x), target)

        wrt = [x] + model.parameters()
        max_coords = 2 if max_coords is None else max(1, min(2, max_coords))
    else:
        raise ValueError(f"unknown block '{name}' (choose from {BLOCK_NAMES})")

    result = finite_diff_grad_check(f, wrt, eps=eps,
                                    max_coords_per_tensor=max_coords, rng=sampler)
    return BlockCheck(block=name, result=result)


def run_block_gradchecks(seed: int = 0, eps: float = 1e-4, blocks=None,
                         max_coords: int | None = 200) -> list[BlockCheck]:
    """Check every block (or the named subset) under one seed."""
    names = BLOCK_NAMES if blocks is None else tuple(blocks)
    return [check_block(name, seed=seed, eps=eps, max_coords=max_coords) for name in names]
