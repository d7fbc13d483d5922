"""Step 1: pre-adaptation by prediction smoothness over a memory queue.

For every sample in a batch, the z nearest and z furthest queue entries
(Euclidean distance between embeddings) supply constant neighbour
posteriors. The loss pulls the sample's posterior towards its nearest
neighbours (KL) and pushes it away from its furthest ones (dot product).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hcpr.data import AugmentationPolicy, Dataset, WEAK, augment_batch, batches
from hcpr.errors import ConfigError, InputError, NumericError, StateError
from hcpr.model import Classifier, eval_mode, make_optimizer, to_batch

EPS = 1e-8


class PreAdaptConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    z: int = Field(3, ge=1)
    lambda0: float = 1.0
    use_far: bool = True
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(9, ge=0)
    backbone_lr: float = 1e-4
    head_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    # None: min(|target|, 4096)
    queue_capacity: int | None = None
    augment: bool = True
    exclude_self: bool = True

    @model_validator(mode="after")
    def _queue_fits_neighbours(self):
        if self.queue_capacity is not None and self.queue_capacity < 2 * self.z:
            raise ValueError(f"queue_capacity ({self.queue_capacity}) must be >= 2*z ({2 * self.z})")
        return self

    def capacity_for(self, n_target: int) -> int:
        cap = self.queue_capacity if self.queue_capacity is not None else min(n_target, 4096)
        if cap < 2 * self.z:
            raise ConfigError(f"queue capacity {cap} is smaller than 2*z = {2 * self.z}")
        return cap


class MemoryQueue:
    """Fixed-capacity FIFO of (embedding, posterior) snapshots.

    Slots are physical ring-buffer positions; ``ordered()`` returns the
    contents oldest first. Stored tensors are detached copies.
    """

    def __init__(self, capacity: int, embed_dim: int, num_classes: int, dtype=torch.float32):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self.embeddings = torch.zeros(capacity, embed_dim, dtype=dtype)
        self.posteriors = torch.zeros(capacity, num_classes, dtype=dtype)
        self.ids = torch.full((capacity,), -1, dtype=torch.long)
        self.write_cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def update(self, embeddings, posteriors, ids=None) -> "MemoryQueue":
        embeddings = torch.as_tensor(embeddings).detach()
        posteriors = torch.as_tensor(posteriors).detach()
        if embeddings.ndim != 2 or embeddings.shape[1] != self.embeddings.shape[1]:
            raise InputError(f"embeddings must be B x {self.embeddings.shape[1]}, got {tuple(embeddings.shape)}")
        if posteriors.shape != (len(embeddings), self.posteriors.shape[1]):
            raise InputError(f"posteriors must be {len(embeddings)} x {self.posteriors.shape[1]}")
        ids = torch.full((len(embeddings),), -1, dtype=torch.long) if ids is None else torch.as_tensor(ids, dtype=torch.long)
        b = len(embeddings)
        keep = min(b, self.capacity)
        slots = (self.write_cursor + (b - keep) + torch.arange(keep)) % self.capacity
        self.embeddings[slots] = embeddings[b - keep :].to(self.embeddings.dtype)
        self.posteriors[slots] = posteriors[b - keep :].to(self.posteriors.dtype)
        self.ids[slots] = ids[b - keep :]
        self.write_cursor = (self.write_cursor + b) % self.capacity
        self.size = min(self.size + b, self.capacity)
        return self

    def slots(self) -> torch.Tensor:
        """Physical slot indices, oldest entry first."""
        if self.size < self.capacity:
            return torch.arange(self.size)
        return (torch.arange(self.capacity) + self.write_cursor) % self.capacity

    def ordered(self) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.slots()
        return self.embeddings[s], self.posteriors[s]


def queue_update(queue: MemoryQueue, embeddings, posteriors, ids=None) -> MemoryQueue:
    return queue.update(embeddings, posteriors, ids)


@dataclass
class NeighborSet:
    nn_indices: torch.Tensor
    fn_indices: torch.Tensor


def find_neighbors_batch(queries, queue: MemoryQueue, z: int, query_ids=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest and furthest queue slots for each query row, each B x z.

    Ties go to the lower slot index. Furthest slots are chosen among the
    slots not already nearest, so the two sets never overlap. With
    ``query_ids`` given, slots holding the same instance id are skipped.
    """
    n = len(queue)
    queries = torch.as_tensor(queries).detach()
    if queries.ndim == 1:
        queries = queries[None]
    bank = queue.embeddings[:n].double()
    dist = torch.cdist(queries.double(), bank, compute_mode="donot_use_mm_for_euclid_dist")
    excluded = torch.zeros_like(dist, dtype=torch.bool)
    if query_ids is not None:
        excluded = torch.as_tensor(query_ids, dtype=torch.long)[:, None] == queue.ids[:n][None, :]
    available = n - excluded.sum(1)
    if n < 2 * z or int(available.min()) < 2 * z:
        raise StateError(
            f"memory queue holds {n} usable entries but 2*z = {2 * z} are needed; warm the queue up first"
        )
    near_key = dist.masked_fill(excluded, math.inf)
    nn_idx = torch.sort(near_key, dim=1, stable=True).indices[:, :z]
    far_mask = excluded.clone()
    far_mask.scatter_(1, nn_idx, True)
    far_key = (-dist).masked_fill(far_mask, math.inf)
    fn_idx = torch.sort(far_key, dim=1, stable=True).indices[:, :z]
    return nn_idx, fn_idx


def find_neighbors(query_embedding, queue: MemoryQueue, z: int) -> NeighborSet:
    nn_idx, fn_idx = find_neighbors_batch(query_embedding, queue, z)
    return NeighborSet(nn_idx[0], fn_idx[0])


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise NumericError("non-finite input to loss")


def smoothness_terms(p: torch.Tensor, neighbor_posteriors: torch.Tensor) -> torch.Tensor:
    """Per-row sum over neighbours of KL(p || q); p is B x C, neighbours B x z x C."""
    q = neighbor_posteriors.detach()
    p_log = torch.log(p.clamp_min(EPS))
    q_log = torch.log(q.clamp_min(EPS))
    return (p[:, None, :] * (p_log[:, None, :] - q_log)).sum(dim=(1, 2))


def far_terms(p: torch.Tensor, far_posteriors: torch.Tensor) -> torch.Tensor:
    """Per-row sum over far neighbours of p . q; p is B x C, far B x z x C."""
    return (p[:, None, :] * far_posteriors.detach()).sum(dim=(1, 2))


def smoothness_loss(p_i, neighbor_posteriors) -> torch.Tensor:
    p_i = torch.as_tensor(p_i)
    q = torch.as_tensor(neighbor_posteriors)
    _check_finite(p_i, q)
    return smoothness_terms(p_i[None], q[None])[0]


def far_loss(p_i, far_posteriors) -> torch.Tensor:
    p_i = torch.as_tensor(p_i)
    q = torch.as_tensor(far_posteriors)
    if p_i.ndim != 1 or q.ndim != 2 or q.shape[1] != p_i.shape[0]:
        raise InputError("far_loss expects p_i of shape C and far posteriors of shape z x C")
    return far_terms(p_i[None], q[None])[0]


def lambda_schedule(iteration: int, max_iter: int, lambda0: float = 1.0) -> float:
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    progress = iteration / max_iter
    return lambda0 * (1.0 + 10.0 * progress) ** -5


def marginal_entropy(posteriors: torch.Tensor) -> float:
    """Entropy of the mean posterior (class balance of the predictions)."""
    mean = posteriors.mean(0).clamp_min(EPS)
    return float(-(mean * mean.log()).sum())


def predict(model: Classifier, images, batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    """Eval-mode (embeddings, posteriors) for a stack of images."""
    embs, posts = [], []
    with eval_mode(model), torch.no_grad():
        for start in range(0, len(images), batch_size):
            _, emb, logits = model(to_batch(model, images[start : start + batch_size]))
            embs.append(emb)
            posts.append(F.softmax(logits, dim=1))
    return torch.cat(embs), torch.cat(posts)


def warm_up_queue(model: Classifier, dataset: Dataset, capacity: int, rng: np.random.Generator) -> MemoryQueue:
    """Fill a fresh queue from an eval-mode pass over randomly chosen target samples."""
    cfg = model.config
    dtype = next(model.parameters()).dtype
    queue = MemoryQueue(capacity, cfg.embed_dim, cfg.num_classes, dtype=dtype)
    pick = np.sort(rng.choice(len(dataset), size=min(capacity, len(dataset)), replace=False))
    emb, post = predict(model, dataset.images[pick])
    return queue.update(emb, post, dataset.ids[pick])


@dataclass
class PreAdaptState:
    """Optimizer, queue and step counter carried across epochs."""

    optimizer: torch.optim.Optimizer
    queue: MemoryQueue
    step: int = 0
    max_steps: int = 1
    history: list = field(default_factory=list)


def start_pre_adapt(model: Classifier, dataset: Dataset, config: PreAdaptConfig, rng: np.random.Generator,
                    max_steps: int) -> PreAdaptState:
    queue = warm_up_queue(model, dataset, config.capacity_for(len(dataset)), rng)
    opt = make_optimizer(model, config.backbone_lr, config.head_lr, config.momentum, config.weight_decay)
    return PreAdaptState(opt, queue, 0, max(max_steps, 1))


def pre_adapt_loss(model: Classifier, images, ids, queue: MemoryQueue, config: PreAdaptConfig, lam: float,
                   anchors: dict[int, int] | None = None):
    """Batch mean of L_SM + lam * L_FAR; returns (loss, sm, far, embeddings, posteriors).

    ``anchors`` (id -> label) adds cross-entropy on the anchored rows,
    averaged over the whole batch.
    """
    _, emb, logits = model(to_batch(model, images))
    p = F.softmax(logits, dim=1)
    nn_idx, fn_idx = find_neighbors_batch(emb, queue, config.z, ids if config.exclude_self else None)
    sm = smoothness_terms(p, queue.posteriors[nn_idx])
    far = far_terms(p, queue.posteriors[fn_idx]) if config.use_far else torch.zeros_like(sm)
    loss = (sm + lam * far).mean()
    if anchors:
        rows = [j for j, i in enumerate(np.asarray(ids).tolist()) if int(i) in anchors]
        if rows:
            target = torch.tensor([anchors[int(ids[j])] for j in rows], dtype=torch.long)
            ce = -torch.log(p[rows].gather(1, target[:, None]).clamp_min(EPS))
            loss = loss + ce.sum() / len(p)
    return loss, sm.detach(), far.detach(), emb.detach(), p.detach()


def pre_adapt_epoch(model: Classifier, target: Dataset, state: PreAdaptState, config: PreAdaptConfig,
                    rng: np.random.Generator, policy: AugmentationPolicy = WEAK,
                    anchors: dict[int, int] | None = None) -> dict:
    """One pass over the target set; updates ``model`` and ``state.queue`` in place."""
    model.train()
    sm_sum = far_sum = ent_sum = 0.0
    n_batches = n_items = 0
    lam = config.lambda0
    for pos in batches(target, config.batch_size, rng, drop_last=len(target) >= config.batch_size):
        if len(pos) < 2:
            continue
        images = target.images[pos]
        if config.augment:
            images = augment_batch(images, rng, policy)
        lam = lambda_schedule(min(state.step, state.max_steps), state.max_steps, config.lambda0)
        loss, sm, far, emb, post = pre_adapt_loss(model, images, target.ids[pos], state.queue, config, lam, anchors)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite pre-adaptation loss at step {state.step}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.queue.update(emb, post, target.ids[pos])
        state.step += 1
        sm_sum += float(sm.sum())
        far_sum += float(far.sum())
        ent_sum += marginal_entropy(post)
        n_items += len(pos)
        n_batches += 1
    stats = {
        "l_sm": sm_sum / max(n_items, 1),
        "l_far": far_sum / max(n_items, 1),
        "lambda": lam,
        "marginal_entropy": ent_sum / max(n_batches, 1),
        "steps": state.step,
    }
    state.history.append(stats)
    return stats


def pre_adapt(model: Classifier, target: Dataset, config: PreAdaptConfig, rng: np.random.Generator,
              epochs: int | None = None, on_epoch=None, anchors: dict[int, int] | None = None) -> list[dict]:
    """Run ``epochs`` (default ``config.epochs``) pre-adaptation epochs; returns per-epoch stats."""
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0:
        return []
    per_epoch = sum(1 for _ in batches(len(target), config.batch_size, np.random.default_rng(0),
                                       drop_last=len(target) >= config.batch_size))
    state = start_pre_adapt(model, target, config, rng, max_steps=epochs * per_epoch)
    out = []
    for epoch in range(epochs):
        stats = pre_adapt_epoch(model, target, state, config, rng, anchors=anchors)
        stats["epoch"] = epoch
        if on_epoch is not None:
            on_epoch(epoch, stats, model)
        out.append(stats)
    return out
