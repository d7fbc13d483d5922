"""Step 2: consolidate top-k prediction hypotheses by their rationales.

Each instance contributes its top-k classes as hypotheses. A hypothesis'
rationale is the feature map pooled with rectified GradCAM weights. Class
centroids of the rationales define a typical rationale per class; each
hypothesis is ranked by its distance to its class centroid, and an
instance is kept with label c when its c-hypothesis ranks below tau1 while
all its other hypotheses rank above tau2.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hcpr.data import Dataset
from hcpr.errors import ConfigError, InputError
from hcpr.model import Classifier, feature_map_and_gradients
from hcpr.preadapt import predict


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_tilde: int = Field(4, ge=2)
    tau1_pct: float = Field(0.8, gt=0)
    tau2_pct: float = Field(1.6, gt=0)
    # open choice; "global" ranks all hypotheses in one pool
    pool: Literal["per_class", "global"] = "per_class"
    batch_size: int = Field(128, ge=1)

    @model_validator(mode="after")
    def _ordered_thresholds(self):
        if self.tau1_pct >= self.tau2_pct:
            raise ValueError(f"tau1_pct ({self.tau1_pct}) must be < tau2_pct ({self.tau2_pct})")
        return self


@dataclass(frozen=True)
class Hypothesis:
    instance_id: int
    hyp_label: int
    posterior_value: float
    rationale: np.ndarray
    rank: int | None = None
    distance: float | None = None


@dataclass
class RationaleCentroids:
    centroids: dict[int, np.ndarray]
    counts: dict[int, int]
    num_classes: int | None = None

    @property
    def absent(self) -> list[int]:
        if self.num_classes is None:
            return []
        return [c for c in range(self.num_classes) if self.counts.get(c, 0) == 0]


@dataclass
class PseudoLabelSet:
    labeled: dict[int, int]
    unlabeled_ids: list[int]

    def __len__(self):
        return len(self.labeled)

    @property
    def ids(self) -> list[int]:
        return sorted(self.labeled)

    def labels_for(self, ids) -> np.ndarray:
        return np.array([self.labeled[int(i)] for i in ids], dtype=np.int64)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def rank_thresholds(config: SelectionConfig, total: int) -> tuple[int, int]:
    tau1 = round_half_up(config.tau1_pct / 100.0 * total)
    tau2 = round_half_up(config.tau2_pct / 100.0 * total)
    if tau1 >= tau2:
        raise ConfigError(f"tau1={tau1} must be < tau2={tau2} (from {config.tau1_pct}% / {config.tau2_pct}% of {total})")
    return tau1, tau2


def top_k_hypotheses(posterior, k_tilde: int) -> list[tuple[int, float]]:
    p = np.asarray(posterior, dtype=np.float64)
    if k_tilde > len(p):
        raise ConfigError(f"k_tilde={k_tilde} exceeds the number of classes {len(p)}")
    order = np.argsort(-p, kind="stable")[:k_tilde]
    return [(int(c), float(p[c])) for c in order]


def rationale_batch(feature_map: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Rectified GradCAM-weighted average pool over the spatial grid; ... x H x W x d' -> ... x d'."""
    weights = (grad * feature_map).sum(-1).clamp_min(0.0)
    h, w = feature_map.shape[-3], feature_map.shape[-2]
    return (weights[..., None] * feature_map).sum(dim=(-3, -2)) / (h * w)


def rationale_representation(feature_map, grad) -> np.ndarray:
    fm = torch.as_tensor(np.asarray(feature_map, dtype=np.float64))
    g = torch.as_tensor(np.asarray(grad, dtype=np.float64))
    if fm.shape != g.shape or fm.ndim != 3:
        raise InputError(f"feature map {tuple(fm.shape)} and gradient {tuple(g.shape)} must both be H x W x d'")
    return rationale_batch(fm, g).numpy()


def build_all_hypotheses(model: Classifier, dataset: Dataset, k_tilde: int, batch_size: int = 128) -> list[Hypothesis]:
    """k_tilde hypotheses per instance with their rationales, instance order preserved."""
    if k_tilde > model.config.num_classes:
        raise ConfigError(f"k_tilde={k_tilde} exceeds num_classes={model.config.num_classes}")
    out: list[Hypothesis] = []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        ids = dataset.ids[start : start + batch_size]
        fmap, post, classes, grads = feature_map_and_gradients(model, images, top_k=k_tilde)
        post_np = post.double().numpy()
        classes = classes.numpy()
        rationales = rationale_batch(fmap[None], grads).detach().double().numpy()  # K x B x d'
        for b, iid in enumerate(ids):
            for k in range(k_tilde):
                c = int(classes[b, k])
                out.append(Hypothesis(int(iid), c, float(post_np[b, c]), rationales[k, b]))
    return out


def class_centroids(hypotheses: list[Hypothesis], num_classes: int | None = None) -> RationaleCentroids:
    if not hypotheses:
        raise InputError("no hypotheses to average")
    labels = np.array([h.hyp_label for h in hypotheses])
    stacked = np.stack([h.rationale for h in hypotheses]).astype(np.float64)
    centroids, counts = {}, {}
    for c in np.unique(labels):
        members = labels == c
        centroids[int(c)] = stacked[members].mean(axis=0)
        counts[int(c)] = int(members.sum())
    return RationaleCentroids(centroids, counts, num_classes)


def rank_hypotheses(hypotheses: list[Hypothesis], centroids: RationaleCentroids,
                    pool: str = "per_class") -> list[Hypothesis]:
    """Attach distance-to-centroid ranks; ties broken by (instance_id, hyp_label)."""
    missing = {h.hyp_label for h in hypotheses} - set(centroids.centroids)
    assert not missing, f"no centroid for classes {sorted(missing)}"
    stacked = np.stack([h.rationale for h in hypotheses]).astype(np.float64)
    cents = np.stack([centroids.centroids[h.hyp_label] for h in hypotheses])
    dist = np.sqrt(((stacked - cents) ** 2).sum(axis=1))
    keys = [h.hyp_label if pool == "per_class" else 0 for h in hypotheses]
    order = sorted(range(len(hypotheses)),
                   key=lambda j: (keys[j], dist[j], hypotheses[j].instance_id, hypotheses[j].hyp_label))
    ranks = [0] * len(hypotheses)
    prev_key, r = None, 0
    for j in order:
        if keys[j] != prev_key:
            prev_key, r = keys[j], 0
        ranks[j] = r
        r += 1
    return [dataclasses.replace(h, rank=ranks[j], distance=float(dist[j])) for j, h in enumerate(hypotheses)]


def select_reliable(ranked: list[Hypothesis], config: SelectionConfig, total_samples: int,
                    all_ids=None) -> PseudoLabelSet:
    """Keep instance i with label y iff rank(i, y) < tau1 and every other rank of i > tau2."""
    tau1, tau2 = rank_thresholds(config, total_samples)
    by_instance: dict[int, list[Hypothesis]] = {}
    for h in ranked:
        if h.rank is None:
            raise InputError("select_reliable needs ranked hypotheses")
        by_instance.setdefault(h.instance_id, []).append(h)
    labeled = {}
    for iid, hyps in by_instance.items():
        low = [h for h in hyps if h.rank < tau1]
        if len(low) != 1:
            continue
        chosen = low[0]
        if all(h.rank > tau2 for h in hyps if h is not chosen):
            labeled[iid] = chosen.hyp_label
    ids = sorted(by_instance) if all_ids is None else sorted(int(i) for i in all_ids)
    return PseudoLabelSet(labeled, [i for i in ids if i not in labeled])


def confidence_select(posteriors, ids, tau: float = 0.95) -> PseudoLabelSet:
    """Baseline: keep the arg-max label wherever the top posterior reaches ``tau``."""
    post = torch.as_tensor(posteriors)
    conf, label = post.max(dim=1)
    labeled = {int(i): int(c) for i, c, ok in zip(ids, label.tolist(), (conf >= tau).tolist()) if ok}
    return PseudoLabelSet(labeled, [int(i) for i in sorted(ids) if int(i) not in labeled])


def near_centroid_select(model: Classifier, dataset: Dataset, tau1_pct: float = 0.8) -> PseudoLabelSet:
    """Baseline: per arg-max class, keep the tau1 instances whose embeddings sit closest to the class mean."""
    emb, post = predict(model, dataset.images)
    tau1 = round_half_up(tau1_pct / 100.0 * len(dataset))
    return near_centroid_from_embeddings(emb.double().numpy(), post.argmax(1).numpy(), dataset.ids, tau1)


def near_centroid_from_embeddings(emb: np.ndarray, pseudo: np.ndarray, ids, tau1: int) -> PseudoLabelSet:
    ids = np.asarray(ids)
    labeled = {}
    for c in np.unique(pseudo):
        members = np.flatnonzero(pseudo == c)
        centre = emb[members].mean(axis=0)
        dist = np.sqrt(((emb[members] - centre) ** 2).sum(axis=1))
        order = sorted(range(len(members)), key=lambda j: (dist[j], ids[members[j]]))
        for j in order[:tau1]:
            labeled[int(ids[members[j]])] = int(c)
    return PseudoLabelSet(labeled, [int(i) for i in sorted(ids.tolist()) if int(i) not in labeled])


@dataclass
class ConsolidationResult:
    pseudo: PseudoLabelSet
    hypotheses: list[Hypothesis]
    centroids: RationaleCentroids
    tau1: int
    tau2: int


def consolidate(model: Classifier, dataset: Dataset, config: SelectionConfig) -> ConsolidationResult:
    """The full step-2 pass on ``dataset`` with a frozen model."""
    hyps = build_all_hypotheses(model, dataset, config.k_tilde, config.batch_size)
    cents = class_centroids(hyps, model.config.num_classes)
    ranked = rank_hypotheses(hyps, cents, config.pool)
    tau1, tau2 = rank_thresholds(config, len(dataset))
    pseudo = select_reliable(ranked, config, len(dataset), dataset.ids)
    return ConsolidationResult(pseudo, ranked, cents, tau1, tau2)


def write_report(result: ConsolidationResult, path, total: int) -> Path:
    """Per-instance hypotheses, ranks and selection, plus a summary block (JSON)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_instance: dict[int, list[Hypothesis]] = {}
    for h in result.hypotheses:
        by_instance.setdefault(h.instance_id, []).append(h)
    labeled = result.pseudo.labeled
    instances = [
        {
            "id": iid,
            "labels": [h.hyp_label for h in hyps],
            "posteriors": [h.posterior_value for h in hyps],
            "distances": [h.distance for h in hyps],
            "ranks": [h.rank for h in hyps],
            "selected": iid in labeled,
            "selected_label": labeled.get(iid),
        }
        for iid, hyps in sorted(by_instance.items())
    ]
    per_class: dict[str, int] = {}
    for c in labeled.values():
        per_class[str(c)] = per_class.get(str(c), 0) + 1
    summary = {
        "total": total,
        "selected": len(labeled),
        "quantity_pct": len(labeled) / total * 100.0,
        "tau1": result.tau1,
        "tau2": result.tau2,
        "per_class": dict(sorted(per_class.items(), key=lambda kv: int(kv[0]))),
        "absent_classes": result.centroids.absent,
    }
    path.write_text(json.dumps({"summary": summary, "instances": instances}, indent=1))
    return path


def read_report(path) -> tuple[PseudoLabelSet, dict]:
    blob = json.loads(Path(path).read_text())
    labeled = {r["id"]: r["selected_label"] for r in blob["instances"] if r["selected"]}
    unlabeled = [r["id"] for r in blob["instances"] if not r["selected"]]
    return PseudoLabelSet(labeled, unlabeled), blob["summary"]
