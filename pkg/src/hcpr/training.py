"""Source-model training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from hcpr.data import AugmentationPolicy, Dataset, augment_batch, batches, evaluation_access
from hcpr.errors import LabelAccessError, NumericError
from hcpr.model import Classifier, ModelConfig, build_model, to_batch
from hcpr.preadapt import predict


class SourceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    flip_prob: float = Field(0.5, ge=0, le=1)


def train_source_model(source: Dataset, model_config: ModelConfig, config: SourceConfig, seed: int) -> Classifier:
    """Plain supervised cross-entropy training on labelled source data."""
    model = build_model(model_config, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    labels = torch.as_tensor(np.array(source.labels))
    policy = AugmentationPolicy("weak", flip_prob=config.flip_prob)
    drop_last = len(source) >= config.batch_size
    total = config.epochs * len(list(batches(len(source), config.batch_size, np.random.default_rng(0), drop_last)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + np.cos(np.pi * min(s, total) / max(total, 1))))
    model.train()
    for _ in range(config.epochs):
        for pos in batches(source, config.batch_size, rng, drop_last=drop_last):
            images = source.images[pos]
            if config.augment:
                images = augment_batch(images, rng, policy)
            _, _, logits = model(to_batch(model, images))
            loss = F.cross_entropy(logits, labels[pos])
            if not torch.isfinite(loss):
                raise NumericError("source training diverged (non-finite loss)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    return model


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]

    @property
    def mean_per_class(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else 0.0


def accuracy_from_predictions(pred, labels) -> EvalResult:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    per_class = {int(c): float((pred[labels == c] == c).mean() * 100.0) for c in np.unique(labels)}
    return EvalResult(float((pred == labels).mean() * 100.0), per_class)


def evaluate(model: Classifier, dataset: Dataset) -> EvalResult:
    """Top-1 accuracy (%) overall and per class."""
    if not dataset.has_labels:
        raise LabelAccessError(f"dataset {dataset.name!r} has no evaluation labels")
    _, post = predict(model, dataset.images)
    with evaluation_access(dataset):
        labels = dataset.labels
    return accuracy_from_predictions(post.argmax(1).numpy(), labels)
