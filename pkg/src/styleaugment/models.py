"""Classifier backbones: standard ResNet-18 and its CIFAR adaptation."""

from __future__ import annotations

import torch.nn as nn
from torchvision.models import resnet18


def build_model(arch: str, num_classes: int) -> nn.Module:
    if arch == "resnet18":
        return resnet18(num_classes=num_classes)
    if arch == "small_resnet_cifar":
        # ResNet-18 with a 3x3 stride-1 stem and no initial max-pool,
        # the standard adaptation for 32x32 inputs.
        model = resnet18(num_classes=num_classes)
        model.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        model.maxpool = nn.Identity()
        return model
    raise ValueError(f"unknown architecture {arch!r}; options: resnet18, small_resnet_cifar")
