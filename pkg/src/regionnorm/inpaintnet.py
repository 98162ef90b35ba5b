"""Inpainting generator and discriminator with swappable normalization.

The generator is a three-stage convolutional network (encoder, dilated
residual blocks, decoder); each stage's normalization layer is chosen
independently, which realizes every row of the plugging-location ablation.
Layers using the basic region-normalization variant receive the hole mask
subsampled to their working resolution (factors 1, 2 and 4); the learnable
variant generates its masks internally.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .norm import RNB, RNL, BatchNorm, InstanceNorm, NoNorm
from .tensor import (
    Parameter,
    Tensor,
    abs_,
    as_mask_array,
    conv2d,
    conv_transpose2d,
    get_default_dtype,
    leaky_relu,
    mean_,
    relu,
    sigmoid,
    softplus,
)

NORM_KINDS = ("rn-b", "rn-l", "in", "bn", "none")

#: Per-stage normalization of each named architecture:
#: (encoder, residual blocks, decoder).
ARCHITECTURES = {
    "baseline": ("in", "in", "in"),
    "arch1": ("rn-b", "in", "in"),
    "arch2": ("rn-b", "rn-b", "in"),
    "arch3": ("rn-b", "rn-b", "rn-b"),
    "arch4": ("rn-b", "rn-l", "in"),
    "arch5": ("rn-b", "rn-l", "rn-l"),
    "arch6": ("rn-l", "rn-l", "rn-l"),
    "bn": ("bn", "bn", "bn"),
    "none": ("none", "none", "none"),
}


@dataclass
class GeneratorConfig:
    """Construction recipe for the generator."""

    norm_encoder: str = "rn-b"
    norm_resblocks: str = "rn-l"
    norm_decoder: str = "rn-l"
    base_channels: int = 64
    image_size: int = 256
    resblock_count: int = 8
    rnl_threshold: float = 0.8
    rnl_soft_train: bool = False
    in_channels: int = 3

    def __post_init__(self):
        for kind in (self.norm_encoder, self.norm_resblocks, self.norm_decoder):
            if kind not in NORM_KINDS:
                raise ConfigError(f"unknown normalization kind {kind!r}; choose from {NORM_KINDS}")
        if self.resblock_count < 1:
            raise ConfigError(f"resblock_count must be >= 1, got {self.resblock_count}")
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if not (0.0 < self.rnl_threshold < 1.0):
            raise ConfigError(f"rnl_threshold must lie in (0, 1), got {self.rnl_threshold}")

    def to_dict(self) -> dict:
        return {
            "norm_encoder": self.norm_encoder,
            "norm_resblocks": self.norm_resblocks,
            "norm_decoder": self.norm_decoder,
            "base_channels": self.base_channels,
            "image_size": self.image_size,
            "resblock_count": self.resblock_count,
            "rnl_threshold": self.rnl_threshold,
            "rnl_soft_train": self.rnl_soft_train,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        return cls(**data)


def build_architecture(name: str, **overrides) -> GeneratorConfig:
    """Per-stage normalization assignment for a named architecture row."""
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    enc, res, dec = ARCHITECTURES[name]
    return GeneratorConfig(norm_encoder=enc, norm_resblocks=res, norm_decoder=dec, **overrides)


# ---------------------------------------------------------------------------
# Building blocks.


def _he_weights(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv(nn.Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1):
        super().__init__()
        self.weight = Parameter(_he_weights(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose(nn.Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.weight = Parameter(_he_weights(rng, (cin, cout, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


def make_norm(kind: str, channels: int, rng, config: GeneratorConfig) -> nn.Module:
    if kind == "rn-b":
        return RNB(channels)
    if kind == "rn-l":
        return RNL(rng, threshold=config.rnl_threshold, soft_train=config.rnl_soft_train)
    if kind == "in":
        return InstanceNorm(channels)
    if kind == "bn":
        return BatchNorm(channels)
    if kind == "none":
        return NoNorm()
    raise ConfigError(f"unknown normalization kind {kind!r}")


class ResBlock(nn.Module):
    """Two dilated 3x3 convolutions with normalization, additive skip."""

    def __init__(self, rng, channels: int, norm_kind: str, config: GeneratorConfig):
        super().__init__()
        self.conv1 = Conv(rng, channels, channels, 3, stride=1, padding=2, dilation=2)
        self.norm1 = make_norm(norm_kind, channels, rng, config)
        self.conv2 = Conv(rng, channels, channels, 3, stride=1, padding=2, dilation=2)
        self.norm2 = make_norm(norm_kind, channels, rng, config)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        h = relu(self.norm1(self.conv1(x), mask))
        h = self.norm2(self.conv2(h), mask)
        return x + h


# ---------------------------------------------------------------------------
# Generator.


class Generator(nn.Module):
    """Encoder, dilated residual blocks, decoder; outputs images in [0, 1].

    Stages draw their initial weights from independent seed streams, so
    changing one stage's normalization cannot perturb another stage's
    initialization.
    """

    def __init__(self, config: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng_enc, rng_res, rng_dec = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
        )
        b = config.base_channels

        self.conv1 = Conv(rng_enc, config.in_channels, b, 7, stride=1, padding=3)
        self.norm1 = make_norm(config.norm_encoder, b, rng_enc, config)
        self.conv2 = Conv(rng_enc, b, 2 * b, 4, stride=2, padding=1)
        self.norm2 = make_norm(config.norm_encoder, 2 * b, rng_enc, config)
        self.conv3 = Conv(rng_enc, 2 * b, 4 * b, 4, stride=2, padding=1)
        self.norm3 = make_norm(config.norm_encoder, 4 * b, rng_enc, config)

        self.blocks = nn.ModuleList(
            ResBlock(rng_res, 4 * b, config.norm_resblocks, config)
            for _ in range(config.resblock_count)
        )

        self.deconv1 = ConvTranspose(rng_dec, 4 * b, 2 * b, 4, stride=2, padding=1)
        self.norm4 = make_norm(config.norm_decoder, 2 * b, rng_dec, config)
        self.deconv2 = ConvTranspose(rng_dec, 2 * b, b, 4, stride=2, padding=1)
        self.norm5 = make_norm(config.norm_decoder, b, rng_dec, config)
        self.conv_out = Conv(rng_dec, b, config.in_channels, 7, stride=1, padding=3)

    def _mask_pyramid(self, mask, n: int, h: int, w: int) -> dict:
        """Hole mask at the three working resolutions (or Nones)."""
        if mask is None:
            return {1: None, 2: None, 4: None}
        m1 = as_mask_array(mask, n, h, w, get_default_dtype())
        return {
            1: m1,
            2: np.ascontiguousarray(m1[:, :, ::2, ::2]),
            4: np.ascontiguousarray(m1[:, :, ::4, ::4]),
        }

    def encode(self, x: Tensor, masks: dict) -> Tensor:
        h = relu(self.norm1(self.conv1(x), masks[1]))
        h = relu(self.norm2(self.conv2(h), masks[2]))
        return relu(self.norm3(self.conv3(h), masks[4]))

    def middle(self, h: Tensor, masks: dict) -> Tensor:
        for block in self.blocks:
            h = block(h, masks[4])
        return h

    def decode(self, h: Tensor, masks: dict) -> Tensor:
        h = relu(self.norm4(self.deconv1(h), masks[2]))
        h = relu(self.norm5(self.deconv2(h), masks[1]))
        return sigmoid(self.conv_out(h))

    def forward(self, x: Tensor, mask=None) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"generator expects NCHW input, got {x.shape}")
        n, _, h, w = x.shape
        if h % 4 or w % 4:
            raise ShapeError(f"input size {h}x{w} must be divisible by 4")
        masks = self._mask_pyramid(mask, n, h, w)
        return self.decode(self.middle(self.encode(x, masks), masks), masks)

    def rnl_diagnostics(self) -> dict:
        """Response maps and generated masks from the latest forward pass."""
        out = {}
        for name, module in self.modules():
            if isinstance(module, RNL) and module.last_response is not None:
                out[name] = {"response": module.last_response, "mask": module.last_mask}
        return out

    def set_rnl_threshold(self, t: float) -> None:
        if not (0.0 < t < 1.0):
            raise ConfigError(f"rnl threshold must lie in (0, 1), got {t}")
        self.config = replace(self.config, rnl_threshold=t)
        for _, module in self.modules():
            if isinstance(module, RNL):
                module.threshold = t


# ---------------------------------------------------------------------------
# Discriminator.


class Discriminator(nn.Module):
    """Convolutional critic emitting an N x 1 x h' x w' score map."""

    def __init__(self, seed: int = 0, in_channels: int = 3, base: int = 64):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        widths = (base, 2 * base, 4 * base, 8 * base)
        self.conv1 = Conv(rng, in_channels, widths[0], 4, stride=2, padding=1)
        self.conv2 = Conv(rng, widths[0], widths[1], 4, stride=2, padding=1)
        self.conv3 = Conv(rng, widths[1], widths[2], 4, stride=2, padding=1)
        self.conv4 = Conv(rng, widths[2], widths[3], 4, stride=2, padding=1)
        self.conv5 = Conv(rng, widths[3], 1, 4, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = leaky_relu(self.conv1(x), 0.2)
        h = leaky_relu(self.conv2(h), 0.2)
        h = leaky_relu(self.conv3(h), 0.2)
        h = leaky_relu(self.conv4(h), 0.2)
        return self.conv5(h)


# ---------------------------------------------------------------------------
# Losses and training.


@dataclass
class LossBundle:
    l1_weight: float = 1.0
    adv_weight: float = 0.1
    adv_kind: str = "hinge"

    def __post_init__(self):
        if self.l1_weight < 0 or self.adv_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.adv_kind not in ("hinge", "nonsaturating"):
            raise ConfigError(f"unknown adversarial loss {self.adv_kind!r}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return mean_(abs_(pred - target))


def adversarial_d_loss(real_scores: Tensor, fake_scores: Tensor, kind: str = "hinge") -> Tensor:
    if kind == "hinge":
        return mean_(relu(1.0 - real_scores)) + mean_(relu(1.0 + fake_scores))
    return mean_(softplus(-real_scores)) + mean_(softplus(fake_scores))


def adversarial_g_loss(fake_scores: Tensor, kind: str = "hinge") -> Tensor:
    if kind == "hinge":
        return -mean_(fake_scores)
    return mean_(softplus(-fake_scores))


def composite(completed: Tensor, original: Tensor, mask) -> Tensor:
    """Keep known pixels from the original, synthesized pixels in the hole."""
    n, _, h, w = completed.shape
    m = as_mask_array(mask, n, h, w, completed.data.dtype)
    return original * m + completed * (1.0 - m)


def train_step(
    gen: Generator,
    disc: Discriminator | None,
    images: Tensor,
    masks,
    losses: LossBundle,
    opt_g,
    opt_d=None,
) -> dict:
    """One discriminator update followed by one generator update.

    With a zero adversarial weight the discriminator is skipped entirely
    and the step reduces to l1 regression.
    """
    if images.data.min() < 0.0 or images.data.max() > 1.0:
        raise ShapeError("training images must lie in [0, 1]")
    n, _, h, w = images.shape
    m = as_mask_array(masks, n, h, w, images.data.dtype)

    filled = images * m
    completed = gen(filled, m)
    comp = composite(completed, images, m)

    adversarial = losses.adv_weight > 0 and disc is not None
    loss_d_value = 0.0
    if adversarial:
        opt_d.zero_grad()
        d_real = disc(images)
        d_fake = disc(comp.detach())
        loss_d = adversarial_d_loss(d_real, d_fake, losses.adv_kind)
        loss_d.backward(clear=False)
        opt_d.step()
        loss_d_value = loss_d.item()

    opt_g.zero_grad()
    l1_term = l1_loss(completed, images)
    loss_g = losses.l1_weight * l1_term
    if adversarial:
        loss_g = loss_g + losses.adv_weight * adversarial_g_loss(disc(comp), losses.adv_kind)
    loss_g.backward(clear=True)
    opt_g.step()

    return {"loss_g": loss_g.item(), "loss_d": loss_d_value, "l1": l1_term.item()}


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container with deterministic byte layout.

_MAGIC = b"RNCP"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _collect_entries(model: nn.Module, prefix: str) -> list:
    entries = [(prefix + name, p.data) for name, p in model.named_parameters()]
    entries += [(prefix + name, arr) for name, arr in model.named_buffers()]
    return entries


def save_checkpoint(path, generator: Generator, discriminator: Discriminator | None = None, extra: dict | None = None) -> None:
    """Write parameters (and buffers) with the generator config embedded."""
    entries = _collect_entries(generator, "gen.")
    if discriminator is not None:
        entries += _collect_entries(discriminator, "disc.")
    header = {"generator": generator.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr)
            code = _DTYPE_CODES[arr.dtype]
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint: (header dict, name -> array mapping)."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            dtype = _CODE_DTYPES[code]
            raw = f.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header, arrays


def _load_into(model: nn.Module, arrays: dict, prefix: str) -> None:
    for name, p in model.named_parameters():
        key = prefix + name
        if key not in arrays:
            raise ConfigError(f"checkpoint missing parameter {key}")
        value = arrays[key]
        if value.shape != p.data.shape:
            raise ConfigError(f"checkpoint parameter {key} has shape {value.shape}, expected {p.data.shape}")
        p.data = value.astype(p.data.dtype, copy=True)
    for name, arr in model.named_buffers():
        key = prefix + name
        if key in arrays:
            np.copyto(arr, arrays[key])


def generator_from_checkpoint(path) -> tuple[Generator, dict]:
    """Rebuild the generator recorded in a checkpoint, loading its weights."""
    header, arrays = load_checkpoint(path)
    config = GeneratorConfig.from_dict(header["generator"])
    gen = Generator(config, seed=0)
    _load_into(gen, arrays, "gen.")
    return gen, header
