"""Segmentation models exposing an encoder/decoder split.

``encode(x)`` returns the activations the feature perturbation acts on
(a tuple of tensors), ``decode(feats, size)`` returns logits at ``size`` and
``forward(x) == decode(encode(x), x.shape[-2:])``.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError


def _cbr(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        raise NotImplementedError

    def decode(self, feats: tuple[torch.Tensor, ...], size) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x):
        return self.decode(self.encode(x), x.shape[-2:])

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class TinySegNet(SegModel):
    """Small conv encoder (stride 8, dilated context) with a stride-2 skip decoder."""

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        w = width
        self.register_buffer("mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1))
        self.stem = nn.Sequential(_cbr(3, w, stride=2), _cbr(w, w))
        self.down = nn.Sequential(_cbr(w, 2 * w, stride=2), _cbr(2 * w, 4 * w, stride=2),
                                  _cbr(4 * w, 4 * w, dilation=2))
        self.reduce = nn.Sequential(nn.Conv2d(w, w, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.fuse = _cbr(5 * w, 2 * w)
        self.head = nn.Conv2d(2 * w, num_classes, 1)

    def encode(self, x):
        low = self.stem((x - self.mean) / self.std)
        return low, self.down(low)

    def decode(self, feats, size):
        low, high = feats
        high = F.interpolate(high, size=low.shape[-2:], mode="bilinear", align_corners=False)
        out = self.head(self.fuse(torch.cat([self.reduce(low), high], 1)))
        return F.interpolate(out, size=tuple(size), mode="bilinear", align_corners=False)


class TorchvisionDeepLab(SegModel):
    """Adapter for torchvision DeepLabV3 (ResNet-50) without pretrained weights."""

    def __init__(self, num_classes: int, width: int = 0):
        super().__init__()
        from torchvision.models.segmentation import deeplabv3_resnet50

        net = deeplabv3_resnet50(weights=None, weights_backbone=None, num_classes=num_classes, aux_loss=False)
        self.backbone, self.classifier = net.backbone, net.classifier

    def encode(self, x):
        return (self.backbone(x)["out"],)

    def decode(self, feats, size):
        return F.interpolate(self.classifier(feats[0]), size=tuple(size), mode="bilinear", align_corners=False)


MODELS: dict[str, Callable[..., SegModel]] = {"tiny": TinySegNet, "deeplabv3-r50": TorchvisionDeepLab}


def register_model(name: str, factory: Callable[..., SegModel]) -> None:
    MODELS[name] = factory


def build_model(name: str, num_classes: int, width: int = 16) -> SegModel:
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(MODELS)}")
    return MODELS[name](num_classes, width)
