"""The four SNIDER sub-networks and their wiring.

G_D (denoising) and G_R (rectification) are independent U-Nets of the same
shape. Their last encoder feature maps are summed into the fused feature F,
which drives the segmentation decoder D_s and the counting decoder D_c.

Two layer layouts are provided:

* ``SNIDER``: five double 3x3 conv blocks (32..512 channels) separated by
  2x2 max pooling, mirrored by four nearest-upsample + concat stages and a
  final 1x1 conv.
* ``SNIDER_TINY``: strided 7x7/7x7/5x5 convs (32, 64, 128 channels), a 5x5
  conv and two 7x7 transposed convs back to full resolution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Parameter, ShapeError, Tensor, default_dtype

INIT_STD = 0.01


class Variant(str, enum.Enum):
    SNIDER = "snider"
    SNIDER_TINY = "tiny"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        raise ValueError(f"unknown network variant {value!r} (expected 'snider' or 'tiny')")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv" | "pool" | "up"
    kernel: int = 0
    channels: int = 0
    factor: int = 1  # stride for conv, upsampling factor for deconv


@dataclass(frozen=True)
class NetworkVariant:
    name: Variant
    encoder_spec: tuple[tuple[LayerSpec, ...], ...]
    decoder_spec: tuple[tuple[LayerSpec, ...], ...]
    counting_spec: tuple[LayerSpec, ...]

    @property
    def divisor(self) -> int:
        """Input sizes must be multiples of this (total encoder downsampling)."""
        d = 1
        for block in self.encoder_spec:
            for layer in block:
                if layer.kind == "pool":
                    d *= 2
                elif layer.kind == "conv":
                    d *= layer.factor
        return d

    @property
    def feature_channels(self) -> int:
        return self.encoder_spec[-1][-1].channels


def _c(k: int, ch: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", k, ch, stride)


SNIDER_SPEC = NetworkVariant(
    Variant.SNIDER,
    encoder_spec=(
        (_c(3, 32), _c(3, 32)),
        (LayerSpec("pool"), _c(3, 64), _c(3, 64)),
        (LayerSpec("pool"), _c(3, 128), _c(3, 128)),
        (LayerSpec("pool"), _c(3, 256), _c(3, 256)),
        (LayerSpec("pool"), _c(3, 512), _c(3, 512)),
    ),
    decoder_spec=(
        (LayerSpec("up"), _c(3, 256), _c(3, 256)),
        (LayerSpec("up"), _c(3, 128), _c(3, 128)),
        (LayerSpec("up"), _c(3, 64), _c(3, 64)),
        (LayerSpec("up"), _c(3, 32), _c(3, 32)),
        (_c(1, 3),),
    ),
    counting_spec=(LayerSpec("global", 0, 512), _c(1, 256), _c(1, 128), _c(1, 64), _c(1, 1)),
)

SNIDER_TINY_SPEC = NetworkVariant(
    Variant.SNIDER_TINY,
    encoder_spec=((_c(7, 32, 2),), (_c(7, 64, 2),), (_c(5, 128),)),
    decoder_spec=(
        (_c(5, 64),),
        (LayerSpec("deconv", 7, 32, 2),),
        (LayerSpec("deconv", 7, 3, 2),),
    ),
    counting_spec=(LayerSpec("global", 0, 128), _c(1, 64), _c(1, 1)),
)

SPECS = {Variant.SNIDER: SNIDER_SPEC, Variant.SNIDER_TINY: SNIDER_TINY_SPEC}


# --------------------------------------------------------------------------
# layers


class Module:
    """Minimal container: parameters and batch-norm states are discovered by attribute walk."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Module, Parameter)):
                yield key, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, F.BatchNormState]]:
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_bn_states(f"{prefix}{key}.")
        state = getattr(self, "state", None)
        if isinstance(state, F.BatchNormState):
            yield prefix.rstrip("."), state


class Conv(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int, stride: int = 1, padding=None):
        dt = default_dtype()
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (cout, cin, k, k)).astype(dt))
        self.bias = Parameter(np.zeros(cout, dtype=dt))
        self.stride = stride
        self.padding = F.same_padding(k, stride) if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Deconv(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int, factor: int):
        dt = default_dtype()
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (cin, cout, k, k)).astype(dt))
        self.bias = Parameter(np.zeros(cout, dtype=dt))
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.factor)


class BatchNorm(Module):
    def __init__(self, channels: int):
        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.state = F.BatchNormState.fresh(channels, dt)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, training)


class ConvBlock(Module):
    """conv (or transposed conv) -> batch norm -> LeakyReLU."""

    def __init__(self, conv: "Conv | Deconv", channels: int):
        self.conv = conv
        self.bn = BatchNorm(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x), training))


# --------------------------------------------------------------------------
# encoder / decoders


@dataclass
class EncoderOutput:
    skips: list[Tensor]  # full resolution first
    last: Tensor


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, spec: NetworkVariant, in_channels: int = 3):
        self.layers: list[ConvBlock] = []
        self.plan: list[list[str]] = []
        cin = in_channels
        for block in spec.encoder_spec:
            steps = []
            for layer in block:
                if layer.kind == "pool":
                    steps.append("pool")
                    continue
                self.layers.append(ConvBlock(Conv(rng, cin, layer.channels, layer.kernel, layer.factor), layer.channels))
                steps.append("conv")
                cin = layer.channels
            self.plan.append(steps)

    def __call__(self, x: Tensor, training: bool) -> EncoderOutput:
        feats = []
        it = iter(self.layers)
        for steps in self.plan:
            for step in steps:
                x = F.maxpool2x2(x) if step == "pool" else next(it)(x, training)
            feats.append(x)
        return EncoderOutput(skips=feats[:-1], last=feats[-1])


class UNetDecoder(Module):
    """Decoder for the full variant: upsample, concat the matching skip, two 3x3 convs."""

    def __init__(self, rng: np.random.Generator, spec: NetworkVariant, out_channels: int):
        enc_channels = [block[-1].channels for block in spec.encoder_spec]
        cin = enc_channels[-1]
        self.stages: list[ConvBlock] = []
        for i, block in enumerate(spec.decoder_spec[:-1]):
            cin += enc_channels[-2 - i]
            for layer in block[1:]:
                self.stages.append(ConvBlock(Conv(rng, cin, layer.channels, layer.kernel), layer.channels))
                cin = layer.channels
        self.n_up = len(spec.decoder_spec) - 1
        self.head = Conv(rng, cin, out_channels, 1)

    def __call__(self, feature: Tensor, skips: list[Tensor], training: bool) -> Tensor:
        x = feature
        it = iter(self.stages)
        for i in range(self.n_up):
            skip = skips[-1 - i]
            x = F.concat_channels(F.upsample_nearest2x(x), skip)
            x = next(it)(x, training)
            x = next(it)(x, training)
        return F.sigmoid(self.head(x))


class TinyDecoder(Module):
    """Decoder for the tiny variant.

    5x5 conv at bottleneck resolution, then two x2 transposed convs; the
    input of each transposed conv is concatenated with the encoder feature
    of matching resolution.
    """

    def __init__(self, rng: np.random.Generator, spec: NetworkVariant, out_channels: int):
        enc_channels = [block[-1].channels for block in spec.encoder_spec]
        (first,), (up1,), (up2,) = spec.decoder_spec
        self.conv = ConvBlock(Conv(rng, enc_channels[-1], first.channels, first.kernel), first.channels)
        self.up = ConvBlock(
            Deconv(rng, first.channels + enc_channels[-2], up1.channels, up1.kernel, up1.factor), up1.channels
        )
        self.head = Deconv(rng, up1.channels + enc_channels[-3], out_channels, up2.kernel, up2.factor)

    def __call__(self, feature: Tensor, skips: list[Tensor], training: bool) -> Tensor:
        x = self.conv(feature, training)
        x = self.up(F.concat_channels(x, skips[-1]), training)
        return F.sigmoid(self.head(F.concat_channels(x, skips[-2])))


class CountDecoder(Module):
    """Global NxN conv collapsing F to 1x1, then 1x1 convs down to one scalar.

    No batch norm here: at 1x1 spatial extent a batch of one has a single
    value per channel, which batch statistics cannot normalise.
    """

    def __init__(self, rng: np.random.Generator, spec: NetworkVariant, feature_size: int):
        cin = spec.feature_channels
        self.layers: list[Conv] = []
        for layer in spec.counting_spec:
            k = feature_size if layer.kind == "global" else layer.kernel
            self.layers.append(Conv(rng, cin, layer.channels, k, padding=0))
            cin = layer.channels

    def __call__(self, fused: Tensor) -> Tensor:
        x = fused
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x)
        return F.reshape(x, (x.shape[0], 1))


def _decoder(rng, spec: NetworkVariant, out_channels: int) -> Module:
    cls = TinyDecoder if spec.name is Variant.SNIDER_TINY else UNetDecoder
    return cls(rng, spec, out_channels)


class UNet(Module):
    def __init__(self, rng: np.random.Generator, spec: NetworkVariant):
        self.enc = Encoder(rng, spec)
        self.dec = _decoder(rng, spec, 3)

    def __call__(self, x: Tensor, training: bool) -> tuple[Tensor, EncoderOutput]:
        feats = self.enc(x, training)
        return self.dec(feats.last, feats.skips, training), feats


# --------------------------------------------------------------------------
# the model


@dataclass
class MainOutputs:
    denoised: Tensor
    rectified: Tensor
    fused: Tensor
    fused_skips: list[Tensor]


class SniderModel(Module):
    def __init__(self, spec: NetworkVariant, input_size: int, seed: int):
        self.spec = spec
        self.input_size = input_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.g_d = UNet(rng, spec)
        self.g_r = UNet(rng, spec)
        self.d_s = _decoder(rng, spec, 1)
        self.d_c = CountDecoder(rng, spec, input_size // spec.divisor)
        self.training = True

    @property
    def variant(self) -> Variant:
        return self.spec.name

    def train(self) -> "SniderModel":
        self.training = True
        return self

    def eval(self) -> "SniderModel":
        self.training = False
        return self

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_input(self, x: Tensor) -> None:
        expect = (3, self.input_size, self.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"model built for (B, {expect[0]}, {expect[1]}, {expect[2]}) inputs, got {x.shape}")

    def feature_shape(self, batch: int) -> tuple[int, int, int, int]:
        s = self.input_size // self.spec.divisor
        return (batch, self.spec.feature_channels, s, s)


def build_snider(variant: "Variant | str", input_size: int, seed: int) -> SniderModel:
    """Construct all four sub-networks with N(0, 0.01^2) conv weights and zero biases."""
    spec = SPECS[Variant.parse(variant)]
    if input_size <= 0 or input_size % spec.divisor:
        raise ValueError(f"input_size {input_size} must be a positive multiple of {spec.divisor} for {spec.name.value}")
    return SniderModel(spec, input_size, seed)


def forward_main(model: SniderModel, i_lq: Tensor, training: bool | None = None) -> MainOutputs:
    """Run G_D then G_R and form the fused encoder feature."""
    training = model.training if training is None else training
    model._check_input(i_lq)
    denoised, enc_d = model.g_d(i_lq, training)
    rectified, enc_r = model.g_r(denoised, training)
    fused = F.add(enc_d.last, enc_r.last)
    skips = [F.add(a, b) for a, b in zip(enc_d.skips, enc_r.skips)]
    return MainOutputs(denoised, rectified, fused, skips)


def forward_aux(
    model: SniderModel, fused: Tensor, fused_skips: list[Tensor], training: bool | None = None
) -> tuple[Tensor, Tensor]:
    """Segmentation map (B,1,H,W) in (0,1) and character count (B,1) from the fused features."""
    training = model.training if training is None else training
    if fused.data.ndim != 4 or fused.shape != model.feature_shape(fused.shape[0]):
        raise ShapeError(f"fused feature has shape {fused.shape}, expected {model.feature_shape(fused.shape[0])}")
    segment = model.d_s(fused, fused_skips, training)
    count = model.d_c(fused)
    return segment, count


def recover(model: SniderModel, i_lq: Tensor, rectify: bool = True) -> Tensor:
    """Test-time composition G_R(G_D(x)) using running batch-norm statistics.

    With ``rectify=False`` only G_D is applied (the denoising-only ablation).
    """
    model._check_input(i_lq)
    denoised, _ = model.g_d(i_lq, False)
    if not rectify:
        return denoised
    rectified, _ = model.g_r(denoised, False)
    return rectified
