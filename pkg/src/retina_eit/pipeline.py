"""Training recipes per variant and the end-to-end synthetic run."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ensemble as E
from . import metrics as M
from .data import Dataset, SplitManifest, stratified_split, synth_generate
from .models import BEiT, Classifier, ModelConfig, build_model
from .trainer import History, TrainConfig, fit_tokenizer, pretrain_mim, save_checkpoint, train

log = logging.getLogger(__name__)

MEMBER_ORDER = ("vit", "deit", "cait", "beit")


@dataclass
class TrainedModel:
    model: Classifier
    history: History
    extra: dict = field(default_factory=dict)


def train_variant(variant: str, dataset: Dataset, split: SplitManifest, preset: str = "desk",
                  train_config: TrainConfig | None = None, model_overrides: dict | None = None,
                  teacher: Classifier | None = None, pretrain: bool = True, checkpoint_path=None) -> TrainedModel:
    """Build and train one variant with its full recipe.

    DeiT distils from ``teacher``; without one a ViT of the same preset is
    trained first. BEiT fits its tokenizer and runs masked-image pre-training
    on the training images before fine-tuning, unless ``pretrain`` is off.
    """
    tc = train_config or TrainConfig.from_preset(preset)
    mc = ModelConfig.from_preset(preset, variant, seed=tc.seed, **(model_overrides or {}))
    model = build_model(mc)
    extra: dict = {}
    if variant == "deit" and teacher is None:
        log.info("training a ViT teacher for DeiT")
        teacher = train_variant("vit", dataset, split, preset, tc, model_overrides).model
    if variant == "beit" and pretrain:
        images = dataset.subset(split.train).images
        extra["vq_loss"] = fit_tokenizer(model, images, tc)
        extra["tokenizer_hash_after_fit"] = model.parameter_hash("tokenizer.")
        extra["mim_loss"] = pretrain_mim(model, images, tc)
        extra["tokenizer_hash"] = model.parameter_hash("tokenizer.")
    history = train(model, dataset, split, tc, teacher=teacher if variant == "deit" else None,
                    checkpoint_path=checkpoint_path)
    if isinstance(model, BEiT) and pretrain:
        extra["tokenizer_hash_after_finetune"] = model.parameter_hash("tokenizer.")
    return TrainedModel(model, history, extra)


def predict_set(models: dict[str, Classifier], dataset: Dataset) -> E.PredictionSet:
    return E.PredictionSet.from_models({k: m.predict_proba(dataset.images) for k, m in models.items()},
                                       dataset.ids)


def metrics_report(truths, preds) -> tuple[str, M.Summary, M.PerClass]:
    cm, summary, pc = M.evaluate_labels(truths, preds)
    return M.format_metrics(cm, summary, pc), summary, pc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class PipelineResult:
    out_dir: Path
    members: dict[str, TrainedModel]
    split: SplitManifest
    dataset: Dataset
    grid: E.GridResult
    report: list[E.SubsetRow]
    test_accuracy: dict[str, float]
    train_seconds: dict[str, float]  # wall time, kept out of the written files


def run_pipeline(out_dir, n_per_class: int = 30, seed: int = 0, preset: str = "desk", step: float = 0.05,
                 train_overrides: dict | None = None, model_overrides: dict | None = None,
                 variants=MEMBER_ORDER, header: str = "") -> PipelineResult:
    """synth -> split -> train each variant -> predict -> grid search -> ensemble -> metrics.

    Weights are tuned on validation predictions and scored on the test split.
    Every file written is a deterministic function of the arguments.
    """
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    tc = TrainConfig.from_preset(preset, seed=seed, **(train_overrides or {}))
    dataset = synth_generate(n_per_class, seed)
    split = stratified_split(dataset, seed)
    split.save(out / "split.json")

    members: dict[str, TrainedModel] = {}
    seconds: dict[str, float] = {}
    for v in variants:
        log.info("training %s", v)
        teacher = members["vit"].model if v == "deit" and "vit" in members else None
        t0 = time.perf_counter()
        tm = train_variant(v, dataset, split, preset, tc, model_overrides, teacher=teacher)
        seconds[v] = time.perf_counter() - t0
        members[v] = tm
        save_checkpoint(out / "models" / f"{v}.ckpt", tm.model, epoch=len(tm.history.train_acc),
                        extra={"history": tm.history.to_dict()})
        _write_json(out / f"history_{v}.json", tm.history.to_dict())

    models = {k: tm.model for k, tm in members.items()}
    val_ds, test_ds = dataset.subset(split.val), dataset.subset(split.test)
    val_preds, test_preds = predict_set(models, val_ds), predict_set(models, test_ds)
    E.write_predictions(val_preds, out / "preds_val.csv")
    E.write_predictions(test_preds, out / "preds_test.csv")
    E.write_labels(val_ds.ids, val_ds.labels, out / "labels_val.csv")
    E.write_labels(test_ds.ids, test_ds.labels, out / "labels_test.csv")

    grid = E.grid_search_alpha(val_preds, val_ds.labels, step)
    (out / "gridsearch.txt").write_text(header + _grid_text(val_preds.model_names, grid, step) + "\n")
    rows = E.ensemble_report(test_preds, test_ds.labels, step, tune=(val_preds, val_ds.labels))
    (out / "ensemble_report.txt").write_text(header + E.format_report(rows) + "\n")
    E.report_csv(rows, out / "ensemble_report.csv")

    test_acc = {}
    labelled = {k: test_preds.single_argmax(j) for j, k in enumerate(test_preds.model_names)}
    labelled["ensemble_wm"] = E.weighted_mean_predict(test_preds, grid.alpha)
    labelled["ensemble_mv"] = E.majority_vote_predict(test_preds)
    for name, pred in labelled.items():
        text, summary, pc = metrics_report(test_ds.labels, pred)
        (out / f"metrics_{name}.txt").write_text(header + text + "\n")
        M.write_metrics_csv(summary, pc, out / f"metrics_{name}.csv")
        test_acc[name] = summary.accuracy

    summary = {
        "train_accuracy_max": {k: max(tm.history.train_acc) for k, tm in members.items()},
        "train_accuracy_final": {k: tm.history.train_acc[tm.history.best_epoch] for k, tm in members.items()},
        "epochs_run": {k: len(tm.history.train_acc) for k, tm in members.items()},
        "best_epoch": {k: tm.history.best_epoch for k, tm in members.items()},
        "test_accuracy": test_acc,
        "alpha": [float(a) for a in grid.alpha],
        "beit": dict(members["beit"].extra) if "beit" in members else {},
    }
    _write_json(out / "summary.json", summary)
    return PipelineResult(out, members, split, dataset, grid, rows, test_acc, seconds)


def _grid_text(names, grid: E.GridResult, step: float) -> str:
    weights = ", ".join(f"{n}={a:.2f}" for n, a in zip(names, grid.alpha))
    flat = f" ({grid.n_optimal} lattice points tie at the optimum)" if grid.n_optimal > 1 else ""
    return (f"step {step} over {grid.n_points} lattice points\n"
            f"alpha* = {weights}\naccuracy = {100 * grid.accuracy:.2f}%{flat}")
