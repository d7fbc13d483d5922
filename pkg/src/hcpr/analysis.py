"""Pseudo-label quantity/quality tables and plots."""

from __future__ import annotations

import csv
from pathlib import Path

from hcpr.consolidation import PseudoLabelSet, SelectionConfig, confidence_select, consolidate
from hcpr.data import Dataset
from hcpr.errors import LabelAccessError
from hcpr.model import Classifier
from hcpr.pipeline import pseudo_label_quality
from hcpr.preadapt import predict


def standard_selections(source_model: Classifier, adapted_model: Classifier, target: Dataset,
                        selection: SelectionConfig, tau: float = 0.95) -> dict[str, PseudoLabelSet]:
    """The four comparison rows: confidence and HCPR selection, before and after pre-adaptation."""
    out = {}
    for prefix, model in (("source", source_model), ("pa", adapted_model)):
        _, post = predict(model, target.images)
        out[f"{prefix}_confidence"] = confidence_select(post, target.ids, tau)
    out["hcpr_only"] = consolidate(source_model, target, selection).pseudo
    out["pa_hcpr"] = consolidate(adapted_model, target, selection).pseudo
    return out


def analyze_pseudo_labels(pseudo: PseudoLabelSet, dataset: Dataset,
                          baselines: dict[str, PseudoLabelSet] | None = None,
                          output_dir=None, history: list[dict] | None = None) -> list[dict]:
    """Quantity % and quality % for ``pseudo`` (row "selected") and every baseline.

    With ``output_dir`` the table goes to pseudo_labels_analysis.csv, and a
    quantity/quality-per-epoch plot is drawn when ``history`` has
    confidence snapshots.
    """
    if not dataset.has_labels:
        raise LabelAccessError(f"dataset {dataset.name!r} has no evaluation labels")
    rows = []
    for name, ps in [("selected", pseudo), *(baselines or {}).items()]:
        quantity, quality = pseudo_label_quality(ps, dataset)
        rows.append({"method": name, "count": len(ps), "quantity_pct": quantity, "quality_pct": quality})
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        with open(output_dir / "pseudo_labels_analysis.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        if history and any("confidence_quantity" in h for h in history):
            plot_quantity_quality(history, output_dir / "quantity_quality.png")
    return rows


def plot_quantity_quality(history: list[dict], path, consolidations: list[dict] | None = None) -> Path:
    """Two panels: share of confident predictions and their precision per epoch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [h for h in history if "confidence_quantity" in h]
    epochs = [h["epoch"] for h in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [h["confidence_quantity"] for h in rows], marker="o", label="confidence > tau")
    ax2.plot(epochs, [h["confidence_quality"] for h in rows], marker="o", label="confidence > tau")
    for c in consolidations or []:
        ax1.scatter([c["epoch"]], [c["quantity_pct"]], color="tab:red", zorder=3)
        if c["quality_pct"] is not None:
            ax2.scatter([c["epoch"]], [c["quality_pct"]], color="tab:red", zorder=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("quantity (%)")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("quality (%)")
    ax1.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_accuracy(history: list[dict], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [h for h in history if h.get("accuracy") is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for stage_name in ("pre_adapt", "ssl"):
        pts = [(h["epoch"], h["accuracy"]) for h in rows if h["stage"] == stage_name]
        if pts:
            ax.plot(*zip(*pts), marker=".", label=stage_name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("target accuracy (%)")
    if rows:
        ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
