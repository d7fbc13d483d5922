"""End-to-end adaptation run: pre-adapt, consolidate, then semi-supervised training.

Everything a run needs lives in one PipelineConfig. ``run_pipeline`` writes
checkpoints at each stage boundary plus a JSON report and CSV histories into
``output_dir``; any failure is re-raised as a StageError naming the stage.
"""

from __future__ import annotations

import contextlib
import csv
import datetime as _dt
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from hcpr import __version__
from hcpr.consolidation import (
    PseudoLabelSet,
    SelectionConfig,
    confidence_select,
    consolidate,
    near_centroid_select,
    write_report,
)
from hcpr.data import Dataset, ShiftSpec, digits_pair, evaluation_access, make_synthetic_shift, read_manifest
from hcpr.errors import ConfigError, StageError, StateError
from hcpr.model import Classifier, ModelConfig, load_checkpoint, make_optimizer, save_checkpoint
from hcpr.preadapt import PreAdaptConfig, pre_adapt, predict
from hcpr.ssl import SSLConfig, ssl_train
from hcpr.training import SourceConfig, evaluate, train_source_model

# Pseudo-label analysis reference (DomainNet Rw->Cl): method -> (quantity %, quality %).
REFERENCE_PSEUDO_LABELS = {
    "source_confidence": (3.95, 95.80),
    "pa_confidence": (79.13, 80.76),
    "hcpr_only": (21.35, 84.02),
    "pa_hcpr": (24.65, 90.76),
}


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "digits", "manifest"] = "synthetic"
    synthetic: ShiftSpec = Field(default_factory=ShiftSpec)
    digits_rotation_deg: float = 20.0
    source_manifest: Path | None = None
    target_manifest: Path | None = None

    @model_validator(mode="after")
    def _manifests_exist(self):
        if self.kind == "manifest":
            for name in ("source_manifest", "target_manifest"):
                p = getattr(self, name)
                if p is None:
                    raise ValueError(f"{name} is required when kind is 'manifest'")
                if not Path(p).exists():
                    raise ValueError(f"{name} {p} does not exist")
        return self


def synthetic_input_shape(spec: ShiftSpec) -> tuple[int, int, int]:
    if spec.mode == "tabular":
        return (1, 1, spec.dim)
    return (spec.image_size, spec.image_size, 1)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    source: SourceConfig = Field(default_factory=SourceConfig)
    pre_adapt: PreAdaptConfig = Field(default_factory=PreAdaptConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    ssl: SSLConfig = Field(default_factory=SSLConfig)
    selector: Literal["hcpr", "near_centroid", "confidence_threshold"] = "hcpr"
    use_pre_adapt: bool = True
    use_ssl: bool = True
    # extra pre-adaptation epochs after consolidation, anchored on the pseudo labels
    pa_after_hcpr_epochs: int = Field(0, ge=0)
    # global epochs (pre-adapt + SSL) after which consolidation is re-run
    schedule: list[int] = Field(default_factory=list)
    source_checkpoint: Path | None = None
    # resume after step 1: consolidation and SSL start from this checkpoint
    pre_adapt_checkpoint: Path | None = None
    seed: int = 0
    output_dir: Path = Path("runs/default")
    track_epochs: bool = True

    @field_validator("schedule")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {v}")
        return v

    @field_validator("source_checkpoint", "pre_adapt_checkpoint")
    @classmethod
    def _checkpoint_exists(cls, v):
        if v is not None and not Path(v).exists():
            raise ValueError(f"checkpoint {v} does not exist")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        k1 = self.pre_adapt.epochs if self.use_pre_adapt else 0
        k2 = self.ssl.epochs if self.use_ssl else 0
        for e in self.schedule:
            if not k1 < e < k1 + k2:
                raise ValueError(f"schedule epoch {e} must fall inside the SSL phase ({k1}, {k1 + k2})")
        if self.data.kind == "synthetic":
            spec = self.data.synthetic
            # a synthetic fixture fixes the class count and image shape unless they were set by hand
            updates = {}
            if "num_classes" not in self.model.model_fields_set:
                updates["num_classes"] = spec.num_classes
            if "input_shape" not in self.model.model_fields_set:
                updates["input_shape"] = synthetic_input_shape(spec)
            if updates:
                self.model = self.model.model_copy(update=updates)
            if self.model.num_classes != spec.num_classes:
                raise ValueError(
                    f"model.num_classes={self.model.num_classes} but data.synthetic.num_classes={spec.num_classes}"
                )
        return self

    @property
    def k1_epochs(self) -> int:
        return self.pre_adapt.epochs if self.use_pre_adapt else 0

    @property
    def k2_epochs(self) -> int:
        return self.ssl.epochs if self.use_ssl else 0


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(raw: dict | None) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(raw or {})
    except ValidationError as err:
        raise ConfigError(_format_validation(err)) from None


def parse_config(path, overrides: list[str] | None = None) -> PipelineConfig:
    """Load a YAML (or JSON) config; missing keys take defaults, unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(raw, overrides or []))


def dump_config(config: PipelineConfig) -> dict:
    return config.model_dump(mode="json")


def write_config(config: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dump_config(config), sort_keys=False))
    return path


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict; values are parsed as YAML scalars."""
    raw = json.loads(json.dumps(raw, default=str))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_data(config: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    if config.kind == "synthetic":
        return make_synthetic_shift(config.synthetic, seed)
    if config.kind == "digits":
        return digits_pair(seed, rotation_deg=config.digits_rotation_deg)
    return read_manifest(config.source_manifest), read_manifest(config.target_manifest)


def version_stamp() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunReport:
    source_accuracy: float | None
    pre_adapt_accuracy: float | None
    final_accuracy: float | None
    pseudo_count: int
    total: int
    quantity_pct: float
    quality_pct: float | None
    selector: str
    history: list[dict] = field(default_factory=list)
    consolidations: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = ""
    created: str = ""

    def to_dict(self, with_timestamp: bool = True) -> dict:
        d = asdict(self)
        if not with_timestamp:
            d.pop("created")
        return d

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


@contextlib.contextmanager
def stage(name: str, output_dir: Path | None = None):
    """Re-raise any failure inside the block as StageError(name); leave a failure note behind."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        if output_dir is not None:
            output_dir.mkdir(parents=True, exist_ok=True)
            (output_dir / "failure.json").write_text(
                json.dumps({"stage": name, "error": type(exc).__name__, "message": str(exc)}, indent=1)
            )
        raise StageError(name, exc) from exc


def _accuracy(model, dataset) -> float | None:
    return evaluate(model, dataset).accuracy if dataset.has_labels else None


def pseudo_label_quality(pseudo: PseudoLabelSet, dataset: Dataset) -> tuple[float, float | None]:
    """(quantity %, quality %) of a pseudo-labelled set; quality is None without labels."""
    quantity = len(pseudo) / len(dataset) * 100.0
    if not dataset.has_labels:
        return quantity, None
    if len(pseudo) == 0:
        return quantity, 0.0
    with evaluation_access(dataset):
        truth = dataset.labels[dataset.positions(pseudo.ids)]
    return quantity, float((truth == pseudo.labels_for(pseudo.ids)).mean() * 100.0)


def select_pseudo_labels(model: Classifier, target: Dataset, config: PipelineConfig):
    """Return (pseudo set, consolidation result or None) for the configured selector."""
    if config.selector == "hcpr":
        result = consolidate(model, target, config.selection)
        return result.pseudo, result
    if config.selector == "near_centroid":
        return near_centroid_select(model, target, config.selection.tau1_pct), None
    _, post = predict(model, target.images)
    return confidence_select(post, target.ids, config.ssl.confidence_tau), None


def write_pseudo_csv(pseudo: PseudoLabelSet, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        for i in pseudo.ids:
            w.writerow([i, pseudo.labeled[i]])
    return path


def write_history_csv(history: list[dict], path) -> Path:
    path = Path(path)
    keys: list[str] = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow(row)
    return path


def _confidence_snapshot(model, target, tau) -> dict:
    _, post = predict(model, target.images)
    q, p = pseudo_label_quality(confidence_select(post, target.ids, tau), target)
    return {"confidence_quantity": q, "confidence_quality": p}


def obtain_source_model(config: PipelineConfig, source: Dataset, output_dir: Path) -> Classifier:
    if config.source_checkpoint is not None:
        model, _ = load_checkpoint(config.source_checkpoint)
        if model.config != config.model:
            raise ConfigError(
                f"checkpoint model config {model.config.model_dump()} does not match model {config.model.model_dump()}"
            )
        return model
    model = train_source_model(source, config.model, config.source, config.seed)
    save_checkpoint(output_dir / "source.pt", model, extra={"stage": "source", "seed": config.seed})
    return model


def _run_step1(config, model, target, out, seed, history, log):
    with stage("pre_adapt", out):
        def on_pa_epoch(epoch, stats, m):
            row = {"stage": "pre_adapt", **stats, "epoch": epoch + 1}
            if config.track_epochs and target.has_labels:
                row["accuracy"] = _accuracy(m, target)
                row.update(_confidence_snapshot(m, target, config.ssl.confidence_tau))
            history.append(row)
            log(f"pre-adapt epoch {epoch + 1}: {row}")

        pre_adapt(model, target, config.pre_adapt, np.random.default_rng(seed),
                  epochs=config.k1_epochs, on_epoch=on_pa_epoch)
        pa_acc = _accuracy(model, target)
        save_checkpoint(out / "pre_adapt.pt", model, extra={"stage": "pre_adapt", "epochs": config.k1_epochs})
    return model, pa_acc


def run_pipeline(config: PipelineConfig, source: Dataset | None = None, target: Dataset | None = None,
                 log=None) -> RunReport:
    """Source model -> K1 pre-adapt epochs -> consolidation -> K2 FixMatch epochs.

    Datasets are built from ``config.data`` unless passed in.
    """
    log = log or (lambda msg: None)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.yaml")
    torch.manual_seed(config.seed)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    history: list[dict] = []

    with stage("data", out):
        if source is None or target is None:
            source, target = load_data(config.data, config.seed)

    with stage("source", out):
        if config.pre_adapt_checkpoint is not None and config.source_checkpoint is None:
            src_acc = None
        else:
            model = obtain_source_model(config, source, out)
            src_acc = _accuracy(model, target)
            log(f"source-only target accuracy: {src_acc}")

    # step 1
    if config.pre_adapt_checkpoint is not None:
        with stage("pre_adapt", out):
            model, _ = load_checkpoint(config.pre_adapt_checkpoint)
            if model.config != config.model:
                raise ConfigError("pre_adapt_checkpoint was trained with a different model config")
            pa_acc = _accuracy(model, target)
    else:
        model, pa_acc = _run_step1(config, model, target, out, seeds[0], history, log)

    # step 2
    consolidations = []
    with stage("consolidate", out):
        pseudo, result = select_pseudo_labels(model, target, config)
        if result is not None:
            write_report(result, out / "consolidation.json", len(target))
        write_pseudo_csv(pseudo, out / "pseudo_labels.csv")
        quantity, quality = pseudo_label_quality(pseudo, target)
        consolidations.append({"epoch": config.k1_epochs, "selected": len(pseudo),
                               "quantity_pct": quantity, "quality_pct": quality})
        log(f"selected {len(pseudo)} of {len(target)} ({quantity:.2f}%), quality {quality}")
        if config.pa_after_hcpr_epochs:
            pre_adapt(model, target, config.pre_adapt, np.random.default_rng(seeds[2]),
                      epochs=config.pa_after_hcpr_epochs, anchors=pseudo.labeled)
            save_checkpoint(out / "pre_adapt_anchored.pt", model, extra={"stage": "pa_after_hcpr"})

    # step 3
    with stage("ssl", out):
        k2 = config.k2_epochs
        steps_per = max(1, -(-len(target) // config.ssl.unlabeled_batch))
        if k2:
            if len(pseudo) == 0:
                raise StateError(
                    "the pseudo-labelled set is empty; loosen selection.tau1_pct/tau2_pct "
                    "or lengthen pre-adaptation"
                )
            optimizer = make_optimizer(model, config.ssl.backbone_lr, config.ssl.head_lr,
                                       config.ssl.momentum, config.ssl.weight_decay)
            ssl_rng = np.random.default_rng(seeds[1])
            pending = list(config.schedule)
            running: list[dict] = []

            def on_step(step, m, stats):
                running.append(stats)
                if (step + 1) % steps_per:
                    return None
                epoch = config.k1_epochs + (step + 1) // steps_per
                row = {"stage": "ssl", "epoch": epoch}
                for key in ("supervised", "unsupervised", "mask_rate"):
                    row[key] = float(np.mean([r[key] for r in running]))
                running.clear()
                if config.track_epochs and target.has_labels:
                    row["accuracy"] = _accuracy(m, target)
                    row.update(_confidence_snapshot(m, target, config.ssl.confidence_tau))
                history.append(row)
                log(f"ssl epoch {epoch}: {row}")
                if pending and epoch == pending[0]:
                    pending.pop(0)
                    fresh, res = select_pseudo_labels(m, target, config)
                    q, p = pseudo_label_quality(fresh, target)
                    consolidations.append({"epoch": epoch, "selected": len(fresh),
                                           "quantity_pct": q, "quality_pct": p})
                    if res is not None:
                        write_report(res, out / f"consolidation_epoch{epoch}.json", len(target))
                    # an empty re-selection keeps the previous set
                    return fresh if len(fresh) else None
                return None

            ssl_train(model, pseudo, target, config.ssl, ssl_rng, k2 * steps_per,
                      on_step=on_step, optimizer=optimizer)
        final_acc = _accuracy(model, target)
        save_checkpoint(out / "final.pt", model, extra={"stage": "final"})

    report = RunReport(
        source_accuracy=src_acc,
        pre_adapt_accuracy=pa_acc,
        final_accuracy=final_acc,
        pseudo_count=len(pseudo),
        total=len(target),
        quantity_pct=consolidations[0]["quantity_pct"],
        quality_pct=consolidations[0]["quality_pct"],
        selector=config.selector,
        history=history,
        consolidations=consolidations,
        config=dump_config(config),
        version=version_stamp(),
        created=_dt.datetime.now(_dt.timezone.utc).isoformat(),
    )
    report.write(out / "report.json")
    if history:
        from hcpr.analysis import plot_accuracy, plot_quantity_quality

        write_history_csv(history, out / "history.csv")
        plot_accuracy(history, out / "accuracy.png")
        if any("confidence_quantity" in h for h in history):
            plot_quantity_quality(history, out / "quantity_quality.png", consolidations)
    return report

