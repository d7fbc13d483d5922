"""Step 3: FixMatch training on the pseudo-labelled set and the remainder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from hcpr.consolidation import PseudoLabelSet
from hcpr.data import STRONG, WEAK, AugmentationPolicy, Dataset, augment_batch
from hcpr.errors import NumericError, StateError
from hcpr.model import Classifier, make_optimizer, to_batch
from hcpr.preadapt import EPS


class SSLConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    labeled_batch: int = Field(64, ge=1)
    unlabeled_batch: int = Field(64, ge=1)
    confidence_tau: float = Field(0.95, gt=0, lt=1)
    unlabeled_weight: float = 1.0
    epochs: int = Field(31, ge=0)
    backbone_lr: float = 1e-4
    head_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    eval_every: int = Field(0, ge=0)


def cross_entropy(target: torch.Tensor, posterior: torch.Tensor) -> torch.Tensor:
    """Per-row CE between integer targets and posteriors, with the shared log clamp."""
    return -torch.log(posterior.gather(1, target[:, None]).squeeze(1).clamp_min(EPS))


@dataclass
class FixMatchTerms:
    loss: torch.Tensor
    supervised: torch.Tensor
    unsupervised: torch.Tensor
    mask: torch.Tensor
    pseudo_targets: torch.Tensor


def fixmatch_objective(logits_l, targets_l, logits_uw, logits_us, tau: float, weight: float = 1.0) -> FixMatchTerms:
    """Mean labelled CE + weight * mean over the unlabelled batch of masked CE.

    The pseudo-target is the arg-max of the weak view and carries no gradient.
    """
    sup = cross_entropy(targets_l, F.softmax(logits_l, dim=1)).mean()
    if logits_uw is None or len(logits_uw) == 0:
        zero = sup.new_zeros(())
        empty = torch.zeros(0, dtype=torch.bool)
        return FixMatchTerms(sup, sup, zero, empty, torch.zeros(0, dtype=torch.long))
    with torch.no_grad():
        weak = F.softmax(logits_uw.detach(), dim=1)
        conf, pseudo = weak.max(dim=1)
        mask = conf >= tau
    per_example = cross_entropy(pseudo, F.softmax(logits_us, dim=1))
    unsup = (per_example * mask.to(per_example.dtype)).mean()
    return FixMatchTerms(sup + weight * unsup, sup, unsup, mask, pseudo)


def fixmatch_loss(model: Classifier, labeled_images, labels, unlabeled_images, config: SSLConfig,
                  rng: np.random.Generator, weak: AugmentationPolicy = WEAK,
                  strong: AugmentationPolicy = STRONG) -> tuple[torch.Tensor, dict]:
    """Augment both batches and evaluate the FixMatch objective in one forward pass.

    Weak and strong views of an unlabelled image come from independent draws
    of ``rng``. Returns (loss, stats) with stats holding the two terms and
    the mask rate.
    """
    if len(labeled_images) == 0:
        raise StateError("fixmatch_loss needs a non-empty labelled batch")
    xl = augment_batch(np.asarray(labeled_images), rng, weak)
    nl = len(xl)
    parts = [xl]
    nu = len(unlabeled_images) if unlabeled_images is not None else 0
    if nu:
        parts.append(augment_batch(np.asarray(unlabeled_images), rng, weak))
        parts.append(augment_batch(np.asarray(unlabeled_images), rng, strong))
    _, _, logits = model(to_batch(model, np.concatenate(parts)))
    targets = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    terms = fixmatch_objective(
        logits[:nl], targets,
        logits[nl : nl + nu] if nu else None,
        logits[nl + nu :] if nu else None,
        config.confidence_tau, config.unlabeled_weight,
    )
    stats = {
        "supervised": float(terms.supervised.detach()),
        "unsupervised": float(terms.unsupervised.detach()),
        "mask_rate": float(terms.mask.float().mean()) if nu else 0.0,
    }
    return terms.loss, stats


class _Sampler:
    """Endless shuffled passes over a pool; falls back to drawing with replacement for tiny pools."""

    def __init__(self, pool: np.ndarray, batch: int, rng: np.random.Generator):
        self.pool, self.batch, self.rng = np.asarray(pool), batch, rng
        self.order, self.cursor = np.empty(0, dtype=np.int64), 0

    def __call__(self) -> np.ndarray:
        if len(self.pool) == 0:
            return self.pool
        if len(self.pool) < self.batch:
            return self.rng.choice(self.pool, size=self.batch, replace=True)
        if self.cursor + self.batch > len(self.order):
            self.order, self.cursor = self.rng.permutation(self.pool), 0
        out = self.order[self.cursor : self.cursor + self.batch]
        self.cursor += self.batch
        return out


def ssl_train(model: Classifier, pseudo: PseudoLabelSet, dataset: Dataset, config: SSLConfig,
              rng: np.random.Generator, steps: int, evaluate_fn=None, on_step=None,
              optimizer=None) -> list[dict]:
    """Run ``steps`` FixMatch updates; returns the per-step history.

    ``evaluate_fn(model) -> float`` is called every ``config.eval_every``
    steps when given. ``on_step(step, model, stats)`` may swap the pseudo set by
    returning a new PseudoLabelSet (recursive consolidation).
    """
    if steps == 0:
        return []
    if len(pseudo) == 0:
        raise StateError(
            "the pseudo-labelled set is empty; loosen tau1_pct/tau2_pct or lengthen pre-adaptation"
        )
    optimizer = optimizer or make_optimizer(model, config.backbone_lr, config.head_lr,
                                            config.momentum, config.weight_decay)

    def samplers(ps):
        lab = dataset.positions(ps.ids)
        unl = dataset.positions(ps.unlabeled_ids) if ps.unlabeled_ids else np.empty(0, dtype=np.int64)
        return lab, _Sampler(lab, config.labeled_batch, rng), _Sampler(unl, config.unlabeled_batch, rng)

    lab_pos, draw_l, draw_u = samplers(pseudo)
    label_of = dict(zip(dataset.positions(pseudo.ids).tolist(), pseudo.labels_for(pseudo.ids).tolist()))
    history = []
    model.train()
    for step in range(steps):
        pl, pu = draw_l(), draw_u()
        labels = np.array([label_of[int(p)] for p in pl], dtype=np.int64)
        loss, stats = fixmatch_loss(
            model, dataset.images[pl], labels, dataset.images[pu] if len(pu) else None, config, rng
        )
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite FixMatch loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        stats["step"] = step
        if evaluate_fn is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            stats["accuracy"] = evaluate_fn(model)
            model.train()
        history.append(stats)
        if on_step is not None:
            swapped = on_step(step, model, stats)
            model.train()
            if swapped is not None:
                pseudo = swapped
                lab_pos, draw_l, draw_u = samplers(pseudo)
                label_of = dict(zip(lab_pos.tolist(), pseudo.labels_for(pseudo.ids).tolist()))
    return history
