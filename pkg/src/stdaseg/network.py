"""Backbones, decoders, patch discriminators and the dual-path student ensemble.

Backbones and decoders are looked up by name in small registries so external
implementations (ResNet/ASPP, MiT/MLP heads, ...) can be plugged in:

* a backbone factory is called as ``factory(out_channels=C, downsample=s, **kw)``
  and must return a module mapping ``[B, 3, H, W] -> [B, C, H/s, W/s]`` and
  exposing ``out_channels`` and ``downsample`` attributes;
* a decoder factory is called as ``factory(in_channels=C, num_classes=K, **kw)``
  and must return a module with ``forward(features, out_size)`` producing
  unnormalised logits ``[B, K, *out_size]``.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ddm import DomainDisentangledModule

BACKBONES: dict[str, Callable[..., nn.Module]] = {}
DECODERS: dict[str, Callable[..., nn.Module]] = {}

DISC_CHANNELS = (64, 128, 256, 1)
DISC_STRIDES = (2, 2, 1, 1)
DISC_KERNEL = 4
DISC_PADDING = 1


def register_backbone(name: str):
    def deco(factory):
        BACKBONES[name] = factory
        return factory
    return deco


def register_decoder(name: str):
    def deco(factory):
        DECODERS[name] = factory
        return factory
    return deco


def build_backbone(name: str, **kwargs) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}") from None
    return factory(**kwargs)


def build_decoder(name: str, **kwargs) -> nn.Module:
    try:
        factory = DECODERS[name]
    except KeyError:
        raise KeyError(f"unknown decoder {name!r}; registered: {sorted(DECODERS)}") from None
    return factory(**kwargs)


@register_backbone("tiny_cnn")
class TinyBackbone(nn.Module):
    """Strided 3x3 conv stack; ``log2(downsample)`` stride-2 stages."""

    def __init__(self, out_channels: int = 32, downsample: int = 4, width: Optional[int] = None):
        super().__init__()
        if downsample < 1 or downsample & (downsample - 1):
            raise ValueError(f"downsample must be a power of two, got {downsample}")
        self.out_channels = out_channels
        self.downsample = downsample
        width = width or out_channels
        n_down = downsample.bit_length() - 1
        # the stem already downsamples, so no layer runs at full resolution
        layers: list[nn.Module] = [nn.Conv2d(3, width, 3, stride=2 if n_down else 1, padding=1), nn.ReLU(inplace=True)]
        for _ in range(n_down - 1):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(width, out_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


@register_decoder("conv_head")
class ConvHead(nn.Module):
    """3x3 conv + ReLU + 1x1 classifier, bilinearly upsampled to ``out_size``."""

    def __init__(self, in_channels: int = 32, num_classes: int = 6, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or in_channels
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.head = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, num_classes, 1),
        )

    def forward(self, features, out_size):
        logits = self.head(features)
        if tuple(logits.shape[-2:]) != tuple(out_size):
            logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)
        return logits


@register_backbone("identity")
class IdentityBackbone(nn.Module):
    """Passes the normalised image through; for label-echo test fixtures."""

    def __init__(self, out_channels: int = 3, downsample: int = 1, **_):
        super().__init__()
        if out_channels != 3 or downsample != 1:
            raise ValueError("identity backbone requires out_channels=3 and downsample=1")
        self.out_channels = 3
        self.downsample = 1

    def forward(self, x):
        return x


@register_decoder("palette_nearest")
class PaletteNearest(nn.Module):
    """Scores each class by negative squared distance to its palette colour.

    Fed with colour-coded label images, this echoes the label back.
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 6, palette: Sequence = (), mean=None, std=None):
        super().__init__()
        from .data import NORM_MEAN, NORM_STD

        if in_channels != 3 or len(palette) != num_classes:
            raise ValueError("palette_nearest needs 3 input channels and one palette colour per class")
        self.in_channels = 3
        self.num_classes = num_classes
        self.register_buffer("colors", torch.tensor(palette, dtype=torch.float32) / 255.0)
        self.register_buffer("mean", torch.tensor(mean or NORM_MEAN, dtype=torch.float32))
        self.register_buffer("std", torch.tensor(std or NORM_STD, dtype=torch.float32))

    def forward(self, features, out_size):
        rgb = features * self.std[:, None, None] + self.mean[:, None, None]
        diff = rgb[:, None] - self.colors[None, :, :, None, None].to(rgb.dtype)
        logits = -(diff ** 2).sum(dim=2)
        if tuple(logits.shape[-2:]) != tuple(out_size):
            logits = F.interpolate(logits, size=tuple(out_size), mode="nearest")
        return logits


def disc_output_size(n: int) -> int:
    for s in DISC_STRIDES:
        n = (n + 2 * DISC_PADDING - DISC_KERNEL) // s + 1
    return n


class PatchDiscriminator(nn.Module):
    """Four 4x4 conv blocks, strides (2, 2, 1, 1), channels (64, 128, 256, 1).

    LeakyReLU(0.2) follows the first three blocks; no normalisation layers.
    The output is a single-channel map of raw logits.
    """

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        blocks = []
        prev = in_channels
        for i, (ch, st) in enumerate(zip(DISC_CHANNELS, DISC_STRIDES)):
            conv = nn.Conv2d(prev, ch, DISC_KERNEL, stride=st, padding=DISC_PADDING)
            if i < len(DISC_CHANNELS) - 1:
                blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2, inplace=True)))
            else:
                blocks.append(nn.Sequential(conv))
            prev = ch
        self.blocks = nn.ModuleList(blocks)

    def convs(self) -> list[nn.Conv2d]:
        return [b[0] for b in self.blocks]

    def forward(self, x):
        h, w = x.shape[-2:]
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} channels, got {x.shape[-3]}")
        if min(disc_output_size(h), disc_output_size(w)) < 1:
            raise ValueError(f"feature map {h}x{w} is too small for the discriminator (need at least 12x12)")
        for block in self.blocks:
            x = block(x)
        return x


class StudentEnsemble(nn.Module):
    """Source/target student backbones and decoders, the DDM and two discriminators."""

    def __init__(
        self,
        num_classes: int = 6,
        channels: int = 32,
        downsample: int = 4,
        backbone: str = "tiny_cnn",
        decoder: str = "conv_head",
        reduction: int = 4,
        use_ddm: bool = True,
        backbone_kwargs: Optional[dict] = None,
        decoder_kwargs: Optional[dict] = None,
    ):
        super().__init__()
        bk = dict(backbone_kwargs or {})
        dk = dict(decoder_kwargs or {})
        self.num_classes = num_classes
        self.channels = channels
        self.downsample = downsample
        self.use_ddm = use_ddm
        self.backbone_s = build_backbone(backbone, out_channels=channels, downsample=downsample, **bk)
        self.backbone_t = build_backbone(backbone, out_channels=channels, downsample=downsample, **bk)
        self.decoder_s = build_decoder(decoder, in_channels=channels, num_classes=num_classes, **dk)
        self.decoder_t = build_decoder(decoder, in_channels=channels, num_classes=num_classes, **dk)
        self.ddm = DomainDisentangledModule(channels, reduction)
        self.disc_s = PatchDiscriminator(channels)
        self.disc_t = PatchDiscriminator(channels)

    def student_modules(self) -> dict[str, nn.Module]:
        return {
            "backbone_s": self.backbone_s,
            "backbone_t": self.backbone_t,
            "decoder_s": self.decoder_s,
            "decoder_t": self.decoder_t,
            "ddm": self.ddm,
        }

    def student_parameters(self):
        for m in self.student_modules().values():
            yield from m.parameters()

    def disc_parameters(self):
        yield from self.disc_s.parameters()
        yield from self.disc_t.parameters()

    def disentangle(self, f_s, f_t):
        if not self.use_ddm:
            return f_s, f_t
        return self.ddm(f_s, f_t)


def _check_image(x, s):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"images must be [B, 3, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} is not divisible by backbone downsample {s}")


def extract_features(ensemble: StudentEnsemble, x_s: torch.Tensor, x_t: torch.Tensor):
    """Both backbones on both domains: ``(F_S-s, F_S-t, F_T-s, F_T-t)``."""
    for x in (x_s, x_t):
        _check_image(x, ensemble.downsample)
    return (
        ensemble.backbone_s(x_s),
        ensemble.backbone_s(x_t),
        ensemble.backbone_t(x_s),
        ensemble.backbone_t(x_t),
    )


def segment(decoder: nn.Module, features: torch.Tensor, out_size) -> torch.Tensor:
    expected = getattr(decoder, "in_channels", None)
    if expected is not None and features.shape[1] != expected:
        raise ValueError(f"decoder expects {expected} channels, got {features.shape[1]}")
    return decoder(features, out_size)


def discriminate(disc: PatchDiscriminator, features: torch.Tensor) -> torch.Tensor:
    return disc(features)


def forward_full(ensemble: StudentEnsemble, x_s: torch.Tensor, x_t: torch.Tensor) -> dict:
    """Backbones, DDM per domain, then both decoders on both domains.

    Returned keys follow ``<style>_<domain>``: ``features["S-t"]`` is the
    source-style feature of the target image, ``logits_src_style["t"]`` is
    the source decoder's prediction for the target image, and so on.
    """
    f_ss, f_st, f_ts, f_tt = extract_features(ensemble, x_s, x_t)
    d_ss, d_ts = ensemble.disentangle(f_ss, f_ts)
    d_st, d_tt = ensemble.disentangle(f_st, f_tt)
    size_s = tuple(x_s.shape[-2:])
    size_t = tuple(x_t.shape[-2:])
    return {
        "features": {"S-s": f_ss, "S-t": f_st, "T-s": f_ts, "T-t": f_tt},
        "disentangled": {"S-s": d_ss, "S-t": d_st, "T-s": d_ts, "T-t": d_tt},
        "logits_src_style": {
            "s": segment(ensemble.decoder_s, d_ss, size_s),
            "t": segment(ensemble.decoder_s, d_st, size_t),
        },
        "logits_tgt_style": {
            "s": segment(ensemble.decoder_t, d_ts, size_s),
            "t": segment(ensemble.decoder_t, d_tt, size_t),
        },
    }


def soft_vote(logits_a: torch.Tensor, logits_b: torch.Tensor, vote: str = "prob") -> torch.Tensor:
    """Mean of the two class-probability maps (or raw logits with ``vote="logit"``)."""
    if logits_a.shape != logits_b.shape:
        raise ValueError(f"logit shapes differ: {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}")
    cdim = -3
    if vote == "prob":
        return (logits_a.softmax(dim=cdim) + logits_b.softmax(dim=cdim)) / 2
    if vote == "logit":
        return (logits_a + logits_b) / 2
    raise ValueError(f"vote must be 'prob' or 'logit', got {vote!r}")


def ensemble_predict(logits_a: torch.Tensor, logits_b: torch.Tensor, vote: str = "prob") -> torch.Tensor:
    """Per-pixel argmax of the soft vote; accepts ``[K, H, W]`` or ``[B, K, H, W]``."""
    return soft_vote(logits_a, logits_b, vote).argmax(dim=-3)


@torch.no_grad()
def predict(ensemble: StudentEnsemble, x: torch.Tensor, vote: str = "prob") -> torch.Tensor:
    """Inference on images of one domain: both paths, soft-voted."""
    _check_image(x, ensemble.downsample)
    f_s = ensemble.backbone_s(x)
    f_t = ensemble.backbone_t(x)
    d_s, d_t = ensemble.disentangle(f_s, f_t)
    size = tuple(x.shape[-2:])
    return ensemble_predict(segment(ensemble.decoder_s, d_s, size), segment(ensemble.decoder_t, d_t, size), vote)


@torch.no_grad()
def predict_source_path(ensemble: StudentEnsemble, x: torch.Tensor) -> torch.Tensor:
    """Single-path inference: source backbone and decoder only, no DDM."""
    _check_image(x, ensemble.downsample)
    return segment(ensemble.decoder_s, ensemble.backbone_s(x), tuple(x.shape[-2:])).argmax(dim=1)
