"""Network building blocks: module system, conv/BN layers, dense encoder.

The encoder follows the classic densely-connected recipe: a 7x7 stride-2 stem
with a 3x3 stride-2 max pool, then four dense blocks separated by three
compressing transition layers, for a total downsampling factor of 32. Skip
features are tapped immediately before each downsampling op: the stem's
conv-BN-ReLU output (before its max pool) and the three dense-block outputs
(before their transitions).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from attnseg.tensor import (
    ShapeError,
    Tensor,
    avg_pool2d_2x,
    batch_norm,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
)


class ConfigError(ValueError):
    """A structural hyperparameter is invalid or inconsistent."""


class UninitializedStatsError(RuntimeError):
    """Eval-mode normalization requested before any training batch."""


class Module:
    """Minimal composable module with parameter/buffer registries."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def param_count(self) -> int:
        """Number of trainable scalars (running statistics excluded)."""
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        bufs = {name: b for name, b in self.named_buffers()}
        expected = set(own) | set(bufs)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs[name]
            value = np.asarray(value, dtype=np.float64)
            if target.shape != value.shape:
                raise ConfigError(f"shape mismatch for '{name}': {target.shape} vs {value.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """Sequence of submodules registered under their indices."""

    def __init__(self, mods=()):
        super().__init__()
        self._items: list[Module] = []
        for mod in mods:
            self.append(mod)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _rng(rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng()


class Conv2d(Module):
    """2-d cross-correlation layer; He-normal weight init, zero bias."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=True, rng=None):
        super().__init__()
        if in_channels < 1 or out_channels < 1 or kernel < 1:
            raise ConfigError("Conv2d extents must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            _rng(rng).normal(0.0, std, (out_channels, in_channels, kernel, kernel)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization with EMA running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("num_batches_tracked", np.zeros(1))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            self.num_batches_tracked += 1.0
        elif self.num_batches_tracked[0] == 0:
            raise UninitializedStatsError(
                "eval-mode batch norm before any training batch (running stats empty)"
            )
        return batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class ConvBnRelu(Module):
    """3x3 conv (pad 1, no bias) -> batch norm -> ReLU; keeps spatial size."""

    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, padding=1, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


@dataclass
class DenseBlockConfig:
    """One densely-connected block: adds num_layers * growth channels."""

    num_layers: int
    growth: int
    bn_size: int = 4

    def __post_init__(self):
        if self.num_layers < 1 or self.growth < 1 or self.bn_size < 1:
            raise ConfigError(f"invalid dense block config: {self}")

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.num_layers * self.growth


class DenseLayer(Module):
    """BN-ReLU-1x1 conv (bottleneck) -> BN-ReLU-3x3 conv (growth channels)."""

    def __init__(self, in_channels, growth, bn_size, rng=None):
        super().__init__()
        width = bn_size * growth
        self.bn1 = BatchNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, width, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, growth, 3, padding=1, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(relu(self.bn1(x)))
        return self.conv2(relu(self.bn2(h)))


class DenseBlock(Module):
    """Stack of dense layers; each output is concatenated onto the input."""

    def __init__(self, in_channels, cfg: DenseBlockConfig, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = cfg.out_channels(in_channels)
        self.layers = ModuleList(
            DenseLayer(in_channels + i * cfg.growth, cfg.growth, cfg.bn_size, rng=rng)
            for i in range(cfg.num_layers)
        )

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = concat_channels([x, layer(x)])
        return x


class Transition(Module):
    """BN-ReLU-1x1 conv to floor(theta*C) channels, then 2x2 average pool."""

    def __init__(self, in_channels, compression, rng=None):
        super().__init__()
        out = int(in_channels * compression)
        if out < 1:
            raise ConfigError(
                f"transition compression {compression} of {in_channels} channels leaves none"
            )
        self.out_channels = out
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, out, 1, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return avg_pool2d_2x(self.conv(relu(self.bn(x))))


@dataclass
class EncoderConfig:
    """Stem width plus four dense blocks and the transition compression."""

    stem_channels: int = 64
    blocks: list[DenseBlockConfig] = field(
        default_factory=lambda: [
            DenseBlockConfig(6, 32),
            DenseBlockConfig(12, 32),
            DenseBlockConfig(24, 32),
            DenseBlockConfig(16, 32),
        ]
    )
    compression: float = 0.5
    in_channels: int = 3

    def __post_init__(self):
        if len(self.blocks) != 4:
            raise ConfigError(f"encoder needs exactly 4 dense blocks, got {len(self.blocks)}")
        if not (0.0 < self.compression <= 1.0):
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be positive")

    @classmethod
    def full(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        return cls(
            stem_channels=16,
            blocks=[DenseBlockConfig(2, 8) for _ in range(4)],
            compression=0.5,
            in_channels=1,
        )


DOWNSAMPLE_FACTOR = 32


class Encoder(Module):
    """Four-stage dense encoder; returns the bottleneck and four skip taps."""

    def __init__(self, cfg: EncoderConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.stem_conv = Conv2d(cfg.in_channels, cfg.stem_channels, 7, stride=2,
                                padding=3, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)

        channels = cfg.stem_channels
        skip_channels = [cfg.stem_channels]
        blocks = []
        transitions = []
        for i, bcfg in enumerate(cfg.blocks):
            block = DenseBlock(channels, bcfg, rng=rng)
            blocks.append(block)
            channels = block.out_channels
            if i < 3:
                skip_channels.append(channels)
                tr = Transition(channels, cfg.compression, rng=rng)
                transitions.append(tr)
                channels = tr.out_channels
        self.blocks = ModuleList(blocks)
        self.transitions = ModuleList(transitions)
        self.final_bn = BatchNorm2d(channels)
        self.skip_channels = skip_channels  # resolutions H/2, H/4, H/8, H/16
        self.out_channels = channels

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"encoder expects (N, {self.cfg.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"input extents must be divisible by {DOWNSAMPLE_FACTOR}, got {x.shape[2]}x{x.shape[3]}"
            )
        stem = relu(self.stem_bn(self.stem_conv(x)))
        skips = [stem]
        h = max_pool2d(stem, 3, 2, 1)
        for i in range(4):
            h = self.blocks[i](h)
            if i < 3:
                skips.append(h)
                h = self.transitions[i](h)
        return relu(self.final_bn(h)), skips


def param_count(module: Module) -> int:
    """Trainable scalar count of a module tree (running stats excluded)."""
    return module.param_count()


# ---------------------------------------------------------------------------
# checkpoint format: uint64 header length | JSON header | float64 LE payload
# ---------------------------------------------------------------------------

_CKPT_DTYPE = "<f8"


def save_checkpoint(module: Module, path) -> None:
    """Write parameters and buffers as little-endian doubles with a JSON map."""
    state = module.state_dict()
    entries = {}
    offset = 0
    chunks = []
    for name, arr in state.items():
        entries[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(np.ascontiguousarray(arr, dtype=np.float64).astype(_CKPT_DTYPE))
        offset += arr.size
    header = json.dumps({"dtype": _CKPT_DTYPE, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk.tobytes())


def load_checkpoint(module: Module, path) -> None:
    """Load a checkpoint written by :func:`save_checkpoint` into the module."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype=header["dtype"])
    state = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        state[name] = payload[start : start + n].reshape(shape).astype(np.float64)
    module.load_state_dict(state)
