"""Segmentation metrics, robustness/sparsity sweeps, framework comparison,
and plot/table emission."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import ConfigurationError, DiffusionSchedule, PerturbSpec
from .geometry import PointCloud, perturb, subsample_dataset
from .inference import InferenceSpec, infer_ncf, infer_single_step, predict
from .nets import CDSegModel, NetworkConfig
from .training import LossConfig, TrainConfig, train_loop

log = logging.getLogger(__name__)

SWEEP_SCHEMA_VERSION = 1
TAU_GRID = (0.01, 0.05, 0.1, 0.5, 0.7, 1.0)


# ---------------------------------------------------------------------------
# Confusion matrix and metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows = ground truth
    num_classes: int

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), num_classes)

    def accumulate(self, labels_gt, labels_pred) -> "ConfusionMatrix":
        gt = np.asarray(labels_gt, dtype=np.int64)
        pred = np.asarray(labels_pred, dtype=np.int64)
        if gt.shape != pred.shape:
            raise ValueError(f"label shape mismatch: {gt.shape} vs {pred.shape}")
        mask = gt >= 0
        gt, pred = gt[mask], pred[mask]
        if len(gt) and (gt.max() >= self.num_classes or pred.min() < 0
                        or pred.max() >= self.num_classes):
            raise ValueError("labels out of range for this matrix")
        np.add.at(self.counts, (gt, pred), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.num_classes)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    miou: float
    macc: float
    allacc: float
    per_class_iou: list
    counts: list

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """mIoU over classes present in gt or pred; mAcc over gt classes; allAcc."""
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    union = row + col - diag
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = diag[present] / union[present]
    miou = float(iou[present].mean()) if present.any() else 0.0
    gt_classes = row > 0
    macc = float((diag[gt_classes] / row[gt_classes]).mean()) if gt_classes.any() else 0.0
    total = c.sum()
    allacc = float(diag.sum() / total) if total else 0.0
    return MetricsReport(miou=miou, macc=macc, allacc=allacc,
                         per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
                         counts=cm.counts.tolist())


def evaluate_scenes(model: CDSegModel, scenes: list[PointCloud],
                    sched: DiffusionSchedule, spec: InferenceSpec) -> MetricsReport:
    cm = ConfusionMatrix.empty(model.num_classes)
    for scene in scenes:
        cm.accumulate(scene.labels, predict(model, scene, sched, spec))
    return metrics(cm)


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepResult:
    kind: str  # "noise" | "sparsity" | "compare"
    cells: list  # list of dicts: axis values + metrics
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SWEEP_SCHEMA_VERSION, "kind": self.kind,
                "cells": self.cells, "metadata": self.metadata}


def config_hash(*objs) -> str:
    blob = json.dumps([getattr(o, "to_dict", lambda: o)() if not isinstance(o, dict)
                       else o for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_sweep(result: SweepResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")


def load_sweep(path) -> SweepResult:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != SWEEP_SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported sweep schema: {doc.get('schema_version')}")
    return SweepResult(kind=doc["kind"], cells=doc["cells"], metadata=doc["metadata"])


def noise_sweep(model: CDSegModel, scenes: list[PointCloud], sched: DiffusionSchedule,
                dists: list[str], taus: list[float], spec: InferenceSpec,
                seed: int = 0, perturb_features: bool = False) -> SweepResult:
    """Metrics per (distribution, tau), with the clean tau = 0 row as anchor."""
    taus = [0.0] + [t for t in taus if t != 0.0]
    cells = []
    for d_i, dist in enumerate(dists):
        for t_i, tau in enumerate(taus):
            cm = ConfusionMatrix.empty(model.num_classes)
            for s_i, scene in enumerate(scenes):
                rng = np.random.default_rng([seed, d_i, t_i, s_i])
                noisy = perturb(scene, PerturbSpec(dist, tau), rng,
                                perturb_features=perturb_features)
                cm.accumulate(scene.labels, predict(model, noisy, sched, spec))
            cells.append({"dist": dist, "tau": tau, **metrics(cm).to_dict()})
    return SweepResult(kind="noise", cells=cells, metadata={
        "seed": seed, "dists": dists, "taus": taus,
        "perturb_features": perturb_features,
        "config_hash": config_hash(asdict(model.config), sched.to_dict())})


def sparsity_sweep(train_fn, train_scenes: list[PointCloud], val_scenes: list[PointCloud],
                   sched: DiffusionSchedule, fractions: list[float],
                   seeds: list[int], spec: InferenceSpec) -> SweepResult:
    """Train a fresh model per (fraction, seed) on a scene subset, evaluate full.

    train_fn(scenes, seed) -> CDSegModel encapsulates the training recipe.
    """
    cells = []
    for fraction in fractions:
        for seed in seeds:
            subset = subsample_dataset(train_scenes, fraction,
                                       np.random.default_rng([seed, 977]))
            model = train_fn(subset, seed)
            report = evaluate_scenes(model, val_scenes, sched, spec)
            cells.append({"fraction": fraction, "seed": seed,
                          "train_scenes": len(subset), **report.to_dict()})
    return SweepResult(kind="sparsity", cells=cells,
                       metadata={"fractions": fractions, "seeds": seeds})


# ---------------------------------------------------------------------------
# Framework comparison


def framework_compare(base_config: NetworkConfig, train_scenes, val_scenes,
                      sched: DiffusionSchedule, loss_cfg: LossConfig,
                      train_cfg: TrainConfig, budget: int, val_interval: int,
                      outdir, ncf_steps: int = 10, seed: int = 0,
                      frameworks=("CNF", "NCF", "plain")) -> SweepResult:
    """Train each framework variant under one step budget and record curves.

    Every variant shares seeds, scenes, and budget; they differ only in the
    noise-branch signal and the inference procedure.  Counters record the
    per-scene inference cost of each variant.
    """
    outdir = Path(outdir)
    cells = []
    for framework in frameworks:
        cfg_kwargs = asdict(base_config)
        cfg_kwargs["nn_input"] = "labels" if framework == "NCF" else "features"
        config = NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in cfg_kwargs.items()})
        torch.manual_seed(seed)
        sample = train_scenes[0]
        model = CDSegModel(config, sample.features.shape[1], sample.num_classes)

        def eval_fn(m, _fw=framework):
            if _fw == "NCF":
                cm = ConfusionMatrix.empty(m.num_classes)
                for sc in val_scenes:
                    cm.accumulate(sc.labels, infer_ncf(m, sc, sched, ncf_steps, seed))
                return metrics(cm).miou
            spec = InferenceSpec(mode="SSI", framework="CNF" if _fw == "CNF" else "plain")
            return evaluate_scenes(m, val_scenes, sched, spec).miou

        # enough epochs to cover the budget regardless of dataset size
        epochs = max(train_cfg.epochs, budget)
        run = train_loop(model, train_scenes, sched, loss_cfg,
                         TrainConfig(**{**asdict(train_cfg), "seed": seed,
                                        "epochs": epochs}),
                         outdir / framework.lower(), framework=framework,
                         eval_fn=eval_fn, val_interval=val_interval, max_steps=budget)

        model.reset_counters()
        if framework == "NCF":
            infer_ncf(model, val_scenes[0], sched, ncf_steps, seed)
        else:
            infer_single_step(model, val_scenes[0], sched, seed,
                              "CNF" if framework == "CNF" else "plain")
        losses = [json.loads(line) for line in
                  (outdir / framework.lower() / "train_log.jsonl").read_text().splitlines()]
        cells.append({
            "framework": framework,
            "history": run["history"],
            "best_miou": run["best_metric"],
            "loss_curve": [{"step": r["step"], "total": r["total"]} for r in losses],
            "inference_counters": dict(model.counters),
            "inference_steps": ncf_steps if framework == "NCF" else 1,
        })
    return SweepResult(kind="compare", cells=cells, metadata={
        "budget": budget, "seed": seed, "ncf_steps": ncf_steps,
        "val_interval": val_interval})


def steps_to_reach(history: list, threshold: float) -> int | None:
    """First validation step whose metric meets the threshold."""
    for h in history:
        if h["metric"] >= threshold:
            return h["step"]
    return None


# ---------------------------------------------------------------------------
# Plots and tables (tables are the contract; plots are derived)


def _table_lines(rows: list[tuple]) -> str:
    return "".join(" ".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row)
                   + "\n" for row in rows)


def emit_plots(result: SweepResult, outdir) -> tuple[list, str]:
    """Write one (plot, table) pair per curve; returns (paths, status message)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    if not result.cells:
        return files, "empty sweep: nothing to plot"

    def emit(name, rows, xlabel, ylabel):
        table = outdir / f"{name}.txt"
        table.write_text(_table_lines(rows), encoding="utf-8")
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = [r[0] for r in rows]
        ys = [r[1] for r in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        plot = outdir / f"{name}.svg"
        fig.savefig(plot)
        plt.close(fig)
        files.extend([table, plot])

    if result.kind == "noise":
        for dist in sorted({c["dist"] for c in result.cells}):
            for metric_name in ("miou", "macc", "allacc"):
                rows = [(c["tau"], float(c[metric_name]))
                        for c in result.cells if c["dist"] == dist]
                emit(f"noise_{dist}_{metric_name}", rows, "tau", metric_name)
    elif result.kind == "sparsity":
        for metric_name in ("miou", "macc", "allacc"):
            agg = {}
            for c in result.cells:
                agg.setdefault(c["fraction"], []).append(float(c[metric_name]))
            rows = [(f, float(np.mean(v))) for f, v in sorted(agg.items())]
            emit(f"sparsity_{metric_name}", rows, "train fraction", metric_name)
    elif result.kind == "compare":
        for c in result.cells:
            name = c["framework"].lower()
            emit(f"compare_{name}_miou",
                 [(h["step"], float(h["metric"])) for h in c["history"]],
                 "step", "miou")
            emit(f"compare_{name}_loss",
                 [(r["step"], float(r["total"])) for r in c["loss_curve"]],
                 "step", "total loss")
    else:
        return files, f"unknown sweep kind: {result.kind!r}"
    return files, f"wrote {len(files)} files"
