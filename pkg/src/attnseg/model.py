"""Full segmentation network: dense encoder, attention bottleneck, decoder.

The decoder mirrors the encoder's five downsampling steps: four stages of
bilinear 2x upsampling + skip concatenation + convolution, then a final 2x
upsample into a 1x1 conv + sigmoid head at the input resolution. Three
structural toggles support ablation studies:

* ``use_convblock``: two conv-BN-ReLU repetitions per decoder stage vs one,
* ``use_sfeb``: enhancement blocks on the skip connections vs raw skips,
* ``use_tam``: attention module at the bottleneck vs passthrough.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from attnseg.attention import TransformerAttentionModule
from attnseg.nn import (
    ConfigError,
    ConvBnRelu,
    Conv2d,
    DOWNSAMPLE_FACTOR,
    Encoder,
    EncoderConfig,
    Module,
    ModuleList,
    load_checkpoint,
    save_checkpoint,
)
from attnseg.sfeb import SpatialFeatureEnhancementBlock
from attnseg.tensor import (
    ShapeError,
    Tensor,
    bilinear_upsample_2x,
    concat_channels,
    no_grad,
    sigmoid,
)

PRESET_DEFAULTS = {
    "full": {"input_size": 256, "decoder_widths": (256, 128, 64, 32)},
    "tiny": {"input_size": 64, "decoder_widths": (32, 24, 16, 8)},
}


@dataclass
class ModelConfig:
    """Structural hyperparameters and ablation toggles of the network."""

    preset: str = "tiny"
    input_size: int | None = None
    decoder_widths: tuple | None = None
    use_convblock: bool = True
    use_sfeb: bool = True
    use_tam: bool = True
    tam_heads: int = 1
    gsa_scale: bool = True
    gsa_use_pe: bool = False
    sfeb_in_decoder: bool = False
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESET_DEFAULTS:
            raise ConfigError(f"unknown preset '{self.preset}' (choose full or tiny)")
        defaults = PRESET_DEFAULTS[self.preset]
        if self.input_size is None:
            self.input_size = defaults["input_size"]
        if self.decoder_widths is None:
            self.decoder_widths = defaults["decoder_widths"]
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if len(self.decoder_widths) != 4 or any(w < 1 for w in self.decoder_widths):
            raise ConfigError(f"decoder_widths must be 4 positive ints, got {self.decoder_widths}")
        if self.input_size % DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"input_size must be divisible by {DOWNSAMPLE_FACTOR}, got {self.input_size}"
            )
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.tam_heads < 1:
            raise ConfigError(f"tam_heads must be >= 1, got {self.tam_heads}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.full() if self.preset == "full" else EncoderConfig.tiny()

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "decoder_widths" in d and d["decoder_widths"] is not None:
            d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class DecoderStage(Module):
    """Bilinear 2x upsample, concat the (possibly enhanced) skip, convolve."""

    def __init__(self, in_channels, skip_channels, width, repeats, rng=None):
        super().__init__()
        convs = [ConvBnRelu(in_channels + skip_channels, width, rng=rng)]
        for _ in range(repeats - 1):
            convs.append(ConvBnRelu(width, width, rng=rng))
        self.convs = ModuleList(convs)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        h = concat_channels([bilinear_upsample_2x(x), skip])
        for conv in self.convs:
            h = conv(h)
        return h


class SegmentationModel(Module):
    """Encoder -> (optional) attention bottleneck -> skip-gated decoder -> mask head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config(), rng=rng)
        self.in_channels = self.encoder.cfg.in_channels

        bottleneck_hw = cfg.input_size // DOWNSAMPLE_FACTOR
        if cfg.use_tam:
            self.tam = TransformerAttentionModule(
                self.encoder.out_channels, bottleneck_hw, bottleneck_hw,
                heads=cfg.tam_heads, scale_logits=cfg.gsa_scale,
                spatial_uses_position=cfg.gsa_use_pe, rng=rng,
            )
        else:
            self.tam = None

        skip_chs = self.encoder.skip_channels  # at H/2, H/4, H/8, H/16
        if cfg.use_sfeb:
            self.sfebs = ModuleList(
                SpatialFeatureEnhancementBlock(c, rng=rng) for c in skip_chs
            )
        else:
            self.sfebs = None

        repeats = 2 if cfg.use_convblock else 1
        stages = []
        stage_sfebs = []
        channels = self.encoder.out_channels
        for width, skip_c in zip(cfg.decoder_widths, reversed(skip_chs)):
            stages.append(DecoderStage(channels, skip_c, width, repeats, rng=rng))
            if cfg.sfeb_in_decoder:
                stage_sfebs.append(SpatialFeatureEnhancementBlock(width, rng=rng))
            channels = width
        self.stages = ModuleList(stages)
        self.stage_sfebs = ModuleList(stage_sfebs) if cfg.sfeb_in_decoder else None
        self.head = Conv2d(channels, 1, 1, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        size = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (size, size):
            raise ShapeError(
                f"expected (N, {self.in_channels}, {size}, {size}) input, got {x.shape}"
            )
        h, skips = self.encoder(x)
        if self.tam is not None:
            h = self.tam(h)
        for i, stage in enumerate(self.stages):
            skip = skips[len(skips) - 1 - i]
            if self.sfebs is not None:
                skip = self.sfebs[len(skips) - 1 - i](skip)
            h = stage(h, skip)
            if self.stage_sfebs is not None:
                h = self.stage_sfebs[i](h)
        return sigmoid(self.head(bilinear_upsample_2x(h)))

    def save(self, checkpoint_path, config_path=None) -> None:
        save_checkpoint(self, checkpoint_path)
        if config_path is not None:
            self.cfg.to_json(config_path)

    @classmethod
    def load(cls, checkpoint_path, config_path) -> "SegmentationModel":
        model = build_model(ModelConfig.from_json(config_path))
        load_checkpoint(model, checkpoint_path)
        return model


def build_model(cfg: ModelConfig) -> SegmentationModel:
    """Construct the network deterministically from its config (seed included)."""
    model = SegmentationModel(cfg)
    names = [n for n, _ in model.named_parameters()]
    if len(names) != len(set(names)):
        raise ConfigError("duplicate parameter registration")
    ids = [id(p) for _, p in model.named_parameters()]
    if len(ids) != len(set(ids)):
        raise ConfigError("a parameter tensor is registered twice")
    return model


def predict_mask(model: SegmentationModel, x: Tensor, threshold: float | None = None) -> np.ndarray:
    """Binarize the predicted probabilities: pixel >= threshold -> 1."""
    tau = model.cfg.threshold if threshold is None else threshold
    if not (0.0 < tau < 1.0):
        raise ConfigError(f"threshold must lie in (0, 1), got {tau}")
    with no_grad():
        probs = model(x)
    return (probs.data >= tau).astype(np.float64)
