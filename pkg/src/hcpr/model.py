"""Small convolutional classifier with an exposed last feature map.

The network is conv stages -> last conv block -> global average pool ->
bottleneck (linear + batch norm) -> weight-normalized linear classifier.
The last conv block's post-activation output is the GradCAM target.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from hcpr.errors import CheckpointError, ConfigError, InputError

CHECKPOINT_VERSION = 1


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(10, ge=2)
    feature_channels: int = Field(64, ge=1)
    embed_dim: int = Field(256, ge=1)
    conv_stages: tuple[int, ...] = (16, 32)
    input_shape: tuple[int, int, int] = (16, 16, 1)
    # Open choice: GradCAM on the map after the last ReLU (conventional).
    gradcam_target: Literal["post_activation"] = "post_activation"

    @field_validator("conv_stages")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("conv stage widths must be positive")
        return v

    @field_validator("input_shape")
    @classmethod
    def _positive_shape(cls, v):
        if any(s < 1 for s in v):
            raise ValueError("input_shape entries must be positive")
        return v

    def feature_map_size(self) -> tuple[int, int]:
        h, w = self.input_shape[:2]
        for _ in self.conv_stages:
            h, w = h // 2, w // 2
        return h, w


@dataclass
class ModelOutputs:
    feature_map: torch.Tensor  # B x H x W x d'
    embedding: torch.Tensor  # B x d
    logits: torch.Tensor  # B x C
    posterior: torch.Tensor  # B x C


class Classifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = config.input_shape[2]
        for width in config.conv_stages:
            layers += [
                nn.Conv2d(in_ch, width, 3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            in_ch = width
        layers += [
            nn.Conv2d(in_ch, config.feature_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(config.feature_channels),
            nn.ReLU(),
        ]
        self.features = nn.Sequential(*layers)
        self.bottleneck = nn.Linear(config.feature_channels, config.embed_dim)
        self.bottleneck_bn = nn.BatchNorm1d(config.embed_dim)
        self.classifier = weight_norm(nn.Linear(config.embed_dim, config.num_classes), dim=0)

    def head(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map an NCHW feature map to (embedding, logits)."""
        pooled = fmap.mean(dim=(2, 3))
        emb = self.bottleneck_bn(self.bottleneck(pooled))
        return emb, self.classifier(emb)

    def forward(self, x: torch.Tensor):
        fmap = self.features(x)
        emb, logits = self.head(fmap)
        return fmap, emb, logits

    def backbone_parameters(self):
        return list(self.features.parameters())

    def head_parameters(self):
        return (
            list(self.bottleneck.parameters())
            + list(self.bottleneck_bn.parameters())
            + list(self.classifier.parameters())
        )


def build_model(config: ModelConfig, seed: int) -> Classifier:
    h, w = config.feature_map_size()
    if h < 1 or w < 1:
        raise ConfigError(
            f"input {config.input_shape[:2]} collapses to a {h}x{w} feature map "
            f"after {len(config.conv_stages)} pooling stages"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(config)
    return model


def to_batch(model: Classifier, images) -> torch.Tensor:
    """Convert B x H x W x C images (numpy or tensor) to the model's NCHW input."""
    param = next(model.parameters())
    if not torch.is_tensor(images):
        images = np.asarray(images)
        if not images.flags.writeable:
            images = images.copy()
    x = torch.as_tensor(images)
    x = x.to(dtype=param.dtype)
    expected = tuple(model.config.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise InputError(f"expected images of shape (B, {expected}), got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: Classifier, images) -> ModelOutputs:
    fmap, emb, logits = model(to_batch(model, images))
    return ModelOutputs(
        feature_map=fmap.permute(0, 2, 3, 1),
        embedding=emb,
        logits=logits,
        posterior=F.softmax(logits, dim=1),
    )


class eval_mode:
    """Context manager: put the model in eval mode, restore the previous mode on exit."""

    def __init__(self, model: nn.Module):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def feature_map_and_gradients(model: Classifier, images, classes=None, top_k: int | None = None):
    """Return the feature map, posteriors, classes and d logit(c)/d phi for several classes per row.

    ``classes`` has shape B x K; when omitted, each row's ``top_k`` most
    probable classes are used (ties to the lower index). Gradients have
    shape K x B x H x W x d'. Batch rows are independent because the model
    runs in eval mode.
    """
    x = to_batch(model, images)
    C = model.config.num_classes
    with eval_mode(model), torch.enable_grad():
        with torch.no_grad():
            fmap = model.features(x)
        fmap = fmap.detach().requires_grad_(True)
        _, logits = model.head(fmap)
        if classes is None:
            post = F.softmax(logits.detach(), dim=1).numpy()
            classes = np.argsort(-post, axis=1, kind="stable")[:, :top_k]
        classes = torch.as_tensor(classes, dtype=torch.long)
        if classes.ndim == 1:
            classes = classes[:, None]
        if classes.numel() and (classes.min() < 0 or classes.max() >= C):
            raise InputError(f"class index out of range [0, {C})")
        grads = []
        for k in range(classes.shape[1]):
            picked = logits.gather(1, classes[:, k : k + 1]).sum()
            (g,) = torch.autograd.grad(picked, fmap, retain_graph=k + 1 < classes.shape[1])
            grads.append(g.permute(0, 2, 3, 1))
    return (
        fmap.detach().permute(0, 2, 3, 1),
        F.softmax(logits.detach(), dim=1),
        classes,
        torch.stack(grads),
    )


def logit_feature_gradient(model: Classifier, images, class_index) -> torch.Tensor:
    """d logit(class_index) / d feature_map for every image, shape B x H x W x d'.

    ``class_index`` is one class for the whole batch or one per image.
    Parameters and their ``.grad`` fields are left untouched.
    """
    n = len(images)
    idx = torch.as_tensor(class_index, dtype=torch.long)
    if idx.ndim == 0:
        idx = idx.expand(n)
    _, _, _, grads = feature_map_and_gradients(model, images, idx[:, None])
    return grads[0]


def head_logits_from_feature_map(model: Classifier, feature_map: torch.Tensor) -> torch.Tensor:
    """Logits as a function of a B x H x W x d' feature map (eval mode)."""
    with eval_mode(model):
        return model.head(feature_map.permute(0, 3, 1, 2))[1]


def renormalize_classifier(model: Classifier) -> None:
    """Re-split the classifier weight into unit direction and magnitude."""
    with torch.no_grad():
        weight = model.classifier.weight.detach().clone()
        p = model.classifier.parametrizations.weight
        p.original0.copy_(weight.norm(dim=1, keepdim=True))
        p.original1.copy_(weight / weight.norm(dim=1, keepdim=True).clamp_min(1e-12))


def make_optimizer(model: Classifier, backbone_lr, head_lr, momentum=0.9, weight_decay=1e-3):
    return torch.optim.SGD(
        [
            {"params": model.backbone_parameters(), "lr": backbone_lr},
            {"params": model.head_parameters(), "lr": head_lr},
        ],
        momentum=momentum,
        weight_decay=weight_decay,
    )


def save_checkpoint(path, model: Classifier, optimizer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config.model_dump(mode="json"),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path) -> tuple[Classifier, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version") if isinstance(blob, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    model = build_model(ModelConfig(**blob["config"]), seed=0)
    model.load_state_dict(blob["state_dict"])
    return model, blob
