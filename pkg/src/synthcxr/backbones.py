"""Pluggable convolutional feature extractors.

Every backbone returns ``(last_conv_maps, pooled_features)`` from ``forward``
and carries a :class:`BackboneDescriptor`. ``spec`` holds the constructor
arguments so a checkpoint can rebuild the same architecture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Dict, Tuple

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    d: int
    pretrained_corpus: str = "none"

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(nn.Module):
    descriptor: BackboneDescriptor
    spec: dict

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:  # pragma: no cover
        raise NotImplementedError


class StubBackbone(Backbone):
    """Small seeded conv net, 224x224 input -> width x 28 x 28 maps.

    ``pool`` is "max" (default, suits small local lesions) or "mean".
    """

    def __init__(self, seed: int = 0, width: int = 32, pool: str = "max"):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, 16, kernel_size=5, stride=2, padding=2),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(32, width, kernel_size=3, stride=1, padding=1),
                nn.ReLU(),
            )
        self.descriptor = BackboneDescriptor("stub", width, "none")
        if pool not in ("max", "mean"):
            raise ValueError(f"pool must be 'max' or 'mean', got {pool!r}")
        self.pool = pool
        self.spec = {"name": "stub", "seed": seed, "width": width, "pool": pool}

    def forward(self, x):
        maps = self.features(x)
        pooled = maps.amax(dim=(2, 3)) if self.pool == "max" else maps.mean(dim=(2, 3))
        return maps, pooled


class ResNet50Backbone(Backbone):
    """torchvision ResNet-50 up to layer4; global average pooling gives d = 2048."""

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        self.features = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.descriptor = BackboneDescriptor("resnet50", 2048, "imagenet" if pretrained else "none")
        self.spec = {"name": "resnet50", "pretrained": pretrained}

    def forward(self, x):
        maps = self.features(x)
        return maps, torch.flatten(nn.functional.adaptive_avg_pool2d(maps, 1), 1)


BACKBONES: Dict[str, Callable[..., Backbone]] = {
    "stub": StubBackbone,
    "resnet50": ResNet50Backbone,
}


def make_backbone(name: str, **kwargs) -> Backbone:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None
    return factory(**kwargs)


def rebuild_backbone(spec: dict) -> Backbone:
    """Architecture only; weights come from the checkpoint, so nothing is downloaded."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "resnet50":
        spec["pretrained"] = False
    return make_backbone(name, **spec)
