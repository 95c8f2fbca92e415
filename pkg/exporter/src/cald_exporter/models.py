"""Model resolution: named pretrained networks and local checkpoints.

A model name is either one of the registered torchvision classifiers
(loaded with their default pretrained weights) or a path to a checkpoint
file written as ``{"arch": ..., "state_dict": ..., "num_classes": ...,
"image_size": ...}``. Either way resolution yields an eval-mode module
plus the preprocessing pipeline its weights expect.

Preprocessing is pinned here on purpose: exported features are a function
of these constants, so changing them silently would change every CALD
file downstream. Torchvision entries use the standard ImageNet evaluation
pipeline (resize 256, center crop 224, normalize with the means/stds
below); checkpoint models use a plain square resize and 0.5/0.5
normalization.
"""

from __future__ import annotations

import dataclasses
import os

import torch
from torch import nn
from torchvision import transforms
from torchvision.models import get_model

from .errors import FeatureHookError, ModelResolutionError

TORCHVISION_MODELS = ("resnet18", "resnet34", "resnet50")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

_CHECKPOINT_MEAN = (0.5, 0.5, 0.5)
_CHECKPOINT_STD = (0.5, 0.5, 0.5)


class TinyConvNet(nn.Module):
    """Two conv blocks, global average pooling, one linear head.

    Small enough to run anywhere; exists so local datasets can be exported
    with a checkpoint trained (or fixed) elsewhere rather than an
    ImageNet-scale download.
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(16, num_classes)

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.classifier(torch.flatten(x, 1))


_ARCHS = {"tinyconv": TinyConvNet}


@dataclasses.dataclass(frozen=True)
class ResolvedModel:
    """An eval-mode module with its preprocessing and class count."""

    name: str
    module: nn.Module
    transform: object
    num_classes: int


def final_linear(module: nn.Module) -> nn.Linear:
    """Return the last linear layer in module order.

    This is where features and logits split: the layer's input is the
    pooled penultimate embedding, its output the logits.
    """
    last = None
    for m in module.modules():
        if isinstance(m, nn.Linear):
            last = m
    if last is None:
        raise FeatureHookError("model has no linear layer to split features at")
    return last


def penultimate_width(module: nn.Module) -> int:
    return final_linear(module).in_features


class FeatureTap:
    """Captures the input of a model's final linear layer during forward.

    Use as a context manager around inference; after each forward pass
    ``take()`` returns the captured (n, d) batch and resets. The split is
    only sound if the layer fired exactly once per forward and saw an
    already-pooled 2-d batch, so anything else raises.
    """

    def __init__(self, module: nn.Module):
        self.linear = final_linear(module)
        self._calls = []
        self._handle = None

    def __enter__(self):
        self._handle = self.linear.register_forward_hook(self._record)
        return self

    def __exit__(self, *exc_info):
        self._handle.remove()
        self._handle = None

    def _record(self, module, inputs, output):
        self._calls.append(inputs[0].detach())

    def take(self) -> torch.Tensor:
        calls, self._calls = self._calls, []
        if len(calls) != 1:
            raise FeatureHookError(
                f"final linear layer fired {len(calls)} times in one forward pass")
        feats = calls[0]
        if feats.ndim != 2:
            raise FeatureHookError(
                "expected a pooled (n, d) batch at the final linear layer, "
                f"got shape {tuple(feats.shape)}")
        return feats


def _imagenet_transform():
    return transforms.Compose([
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(_IMAGENET_MEAN, _IMAGENET_STD),
    ])


def _checkpoint_transform(image_size: int):
    return transforms.Compose([
        transforms.Resize((image_size, image_size)),
        transforms.ToTensor(),
        transforms.Normalize(_CHECKPOINT_MEAN, _CHECKPOINT_STD),
    ])


def load_checkpoint(path) -> ResolvedModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError:
        raise
    except Exception as exc:
        raise ModelResolutionError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ModelResolutionError(f"checkpoint {path} is not a field dict")
    for field in ("arch", "state_dict", "num_classes"):
        if field not in payload:
            raise ModelResolutionError(f"checkpoint {path} missing field {field!r}")
    arch = payload["arch"]
    if arch not in _ARCHS:
        known = ", ".join(sorted(_ARCHS))
        raise ModelResolutionError(
            f"checkpoint {path} names unknown architecture {arch!r} (known: {known})")
    module = _ARCHS[arch](num_classes=int(payload["num_classes"]))
    try:
        module.load_state_dict(payload["state_dict"])
    except (RuntimeError, ValueError) as exc:
        raise ModelResolutionError(f"checkpoint {path} does not fit {arch!r}: {exc}") from exc
    module.eval()
    transform = _checkpoint_transform(int(payload.get("image_size", 32)))
    return ResolvedModel(name=str(arch), module=module, transform=transform,
                         num_classes=final_linear(module).out_features)


def resolve_model(name: str) -> ResolvedModel:
    """Resolve a model name or checkpoint path to a ready network.

    Registered torchvision names fetch their default pretrained weights,
    which touches the network cache on first use; checkpoint paths load
    locally. Anything else is an error naming both options.
    """
    if name in TORCHVISION_MODELS:
        module = get_model(name, weights="DEFAULT")
        module.eval()
        return ResolvedModel(name=name, module=module,
                             transform=_imagenet_transform(),
                             num_classes=final_linear(module).out_features)
    if os.path.exists(name):
        return load_checkpoint(name)
    known = ", ".join(TORCHVISION_MODELS)
    raise ModelResolutionError(
        f"unknown model {name!r}: not a registered name ({known}) "
        "and not a checkpoint path")
