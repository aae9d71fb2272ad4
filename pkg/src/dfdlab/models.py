"""Classifier architectures.

Two shapes are supported:

* a plain classifier: an image backbone, fully trainable, topped with
  Dropout + a single-logit linear head;
* a hybrid classifier: the same spatial backbone plus a small convolutional
  branch over 2-channel frequency features, with the two feature vectors
  concatenated before the head.

Backbones "b0"/"b3"/"b6" are EfficientNet variants; "tiny_test" is a small
self-contained CNN for tests and toy runs, which never needs a checkpoint
download (it has no published pretrained weights, so ``pretrained`` is
ignored for it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

FUSIONS = ("feature_concat",)


class BackboneWeightsError(Exception):
    """Pretrained weights could not be fetched or loaded."""


@dataclass(frozen=True)
class FreqBranchConfig:
    in_channels: int = 2
    feature_dim: int = 128

    def __post_init__(self) -> None:
        if self.in_channels <= 0 or self.feature_dim <= 0:
            raise ValueError("in_channels and feature_dim must be positive")


@dataclass(frozen=True)
class ModelConfig:
    backbone_id: str = "b6"
    dropout_rate: float = 0.5
    pretrained: bool = True
    freq_branch: Optional[FreqBranchConfig] = None
    fusion: str = "feature_concat"
    head_seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone_id not in BACKBONE_BUILDERS:
            raise ValueError(
                f"unknown backbone {self.backbone_id!r}, "
                f"expected one of {sorted(BACKBONE_BUILDERS)}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}, expected one of {FUSIONS}")


class TinyBackbone(nn.Module):
    """Four strided conv blocks + global average pool; feature dim 64.

    Small enough to train on a laptop CPU in seconds, which is all it is for.
    """

    feature_dim = 64

    def __init__(self):
        super().__init__()
        self.blocks = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, stride=1, padding=1),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.blocks(x)), 1)


def _efficientnet(variant: str, pretrained: bool) -> tuple[nn.Module, int]:
    from torchvision import models as tvm

    ctor = {
        "b0": (tvm.efficientnet_b0, "EfficientNet_B0_Weights"),
        "b3": (tvm.efficientnet_b3, "EfficientNet_B3_Weights"),
        "b6": (tvm.efficientnet_b6, "EfficientNet_B6_Weights"),
    }[variant]
    build, weights_name = ctor
    try:
        weights = getattr(tvm, weights_name).DEFAULT if pretrained else None
        net = build(weights=weights)
    except Exception as e:
        raise BackboneWeightsError(
            f"could not obtain pretrained weights for backbone {variant!r}: {e}. "
            "Check network access and the TORCH_HOME cache, then retry, or build "
            "with pretrained=False."
        ) from e
    feature_dim = net.classifier[1].in_features
    backbone = nn.Sequential(net.features, net.avgpool, nn.Flatten(1))
    return backbone, feature_dim


BACKBONE_BUILDERS = {
    "tiny_test": lambda pretrained: (TinyBackbone(), TinyBackbone.feature_dim),
    "b0": lambda pretrained: _efficientnet("b0", pretrained),
    "b3": lambda pretrained: _efficientnet("b3", pretrained),
    "b6": lambda pretrained: _efficientnet("b6", pretrained),
}


class FrequencyBranch(nn.Module):
    """Three strided conv blocks over the 2-channel frequency planes.

    Ends with global average pooling, so any input resolution >= 8 works and
    the output is a fixed-size feature vector.
    """

    def __init__(self, config: FreqBranchConfig):
        super().__init__()
        c, f = config.in_channels, config.feature_dim
        self.blocks = nn.Sequential(
            nn.Conv2d(c, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, f, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.in_channels = c
        self.feature_dim = f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.blocks(x)), 1)


def _init_head(linear: nn.Linear, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        linear.weight.normal_(mean=0.0, std=0.01, generator=gen)
        linear.bias.zero_()


def _check_image_batch(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(
            f"expected an image batch shaped (B, 3, H, W), received {tuple(x.shape)}"
        )


class Classifier(nn.Module):
    """Backbone + Dropout + single-logit head. Everything is trainable."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        backbone, feature_dim = BACKBONE_BUILDERS[config.backbone_id](config.pretrained)
        self.config = config
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.dropout = nn.Dropout(config.dropout_rate)
        self.head = nn.Linear(feature_dim, 1)
        _init_head(self.head, config.head_seed)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        _check_image_batch(images)
        return self.backbone(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.features(images)))


class HybridClassifier(nn.Module):
    """Spatial backbone fused with a frequency branch by feature concat."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.freq_branch is None:
            raise ValueError("hybrid model requires a freq_branch config")
        backbone, feature_dim = BACKBONE_BUILDERS[config.backbone_id](config.pretrained)
        self.config = config
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.freq_branch = FrequencyBranch(config.freq_branch)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.head = nn.Linear(feature_dim + self.freq_branch.feature_dim, 1)
        _init_head(self.head, config.head_seed)

    def forward(self, images: torch.Tensor, frequency: torch.Tensor) -> torch.Tensor:
        _check_image_batch(images)
        if frequency is None:
            raise ValueError("hybrid model called without its frequency input")
        c = self.freq_branch.in_channels
        if frequency.ndim != 4 or frequency.shape[1] != c:
            raise ValueError(
                f"expected a frequency batch shaped (B, {c}, H, W), "
                f"received {tuple(frequency.shape)}"
            )
        if frequency.shape[0] != images.shape[0]:
            raise ValueError(
                f"batch size mismatch: {images.shape[0]} images, "
                f"{frequency.shape[0]} frequency maps"
            )
        spatial = self.backbone(images)
        freq = self.freq_branch(frequency)
        fused = torch.cat([spatial, freq], dim=1)
        return self.head(self.dropout(fused))


def build_model(config: ModelConfig) -> nn.Module:
    """Build a plain classifier, or a hybrid one when freq_branch is set."""
    if config.freq_branch is not None:
        return HybridClassifier(config)
    return Classifier(config)


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    grad_flow: dict[str, bool]

    @property
    def all_trainable(self) -> bool:
        return self.total_params == self.trainable_params and all(
            self.grad_flow.values()
        )


def trainable_parameter_report(model: nn.Module, probe_batch) -> ParamReport:
    """Report which parameters actually receive gradient from a probe batch.

    Runs one forward/backward on the probe (a tensor, or an (images,
    frequency) tuple for hybrids) and records, per named parameter, whether a
    gradient arrived. Gradients are cleared afterwards.
    """
    was_training = model.training
    model.train()
    model.zero_grad(set_to_none=True)
    if isinstance(probe_batch, (tuple, list)):
        logits = model(*probe_batch)
    else:
        logits = model(probe_batch)
    logits.sum().backward()
    grad_flow = {
        name: p.grad is not None for name, p in model.named_parameters()
    }
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    model.zero_grad(set_to_none=True)
    model.train(was_training)
    return ParamReport(
        total_params=total, trainable_params=trainable, grad_flow=grad_flow
    )
