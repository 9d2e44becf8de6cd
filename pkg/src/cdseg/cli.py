"""Command-line entry point: one YAML config drives scene synthesis, training,
evaluation, sweeps, framework comparison, and plotting.

The config schema is strict: unknown keys are rejected with their dotted path.
Every run writes a fully resolved snapshot of the config next to its outputs
so results can be reproduced from the snapshot alone.  Exit codes: 0 success,
1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import evaluation as ev
from .diffusion import ConfigurationError, make_schedule
from .geometry import (GenerationError, ParseError, SceneSpec, load_dataset,
                       save_dataset, synth_scene)
from .inference import InferenceSpec, infer_ncf, predict, save_prediction
from .nets import (CDSegModel, NetworkConfig, load_checkpoint, paper_preset,
                   tiny_preset)
from .training import LossConfig, TrainConfig, train_loop

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CDSEG_OUTPUT_ROOT"
PRESETS = {"tiny": tiny_preset, "paper": paper_preset}

CONFIG_ERRORS = (ConfigurationError, GenerationError, ParseError,
                 yaml.YAMLError, TypeError)


def default_config() -> dict:
    """Every key the schema accepts, with its default value."""
    return {
        "preset": "tiny",
        "seed": 0,
        "framework": "CNF",
        "output": "runs/exp",
        # overrides applied on top of the chosen network preset
        "network": {},
        "schedule": {"kind": "linear", "T": 100, "range": [1e-4, 0.02]},
        "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)},
        "loss": {f.name: f.default for f in dataclasses.fields(LossConfig)},
        "data": {
            "path": None,  # defaults to <output>/dataset
            "num_train": 8,
            "num_val": 4,
            "scene": {"num_points": 2048, "num_classes": 4,
                      "extent": [4.0, 4.0, 2.5], "num_blobs": 4,
                      "blob_radius": 0.4, "feature_noise": 0.05},
        },
        "inference": {"mode": "SSI", "steps": 1, "seed": 0, "redraw": False},
        "sweep": {
            "noise": {"dists": ["gaussian", "uniform"],
                      "taus": list(ev.TAU_GRID),
                      "perturb_features": False},
            "sparsity": {"fractions": [1.0, 0.5, 0.25], "seeds": [0]},
        },
        "compare": {"budget": 200, "val_interval": 20, "ncf_steps": 10,
                    "frameworks": ["CNF", "NCF", "plain"]},
        "val_interval": 50,
    }


_NETWORK_FIELDS = {f.name for f in dataclasses.fields(NetworkConfig)}


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge of override onto base, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if path == "network":
            if key not in _NETWORK_FIELDS:
                raise ConfigurationError(f"unknown config key: {here}")
            out[key] = value
            continue
        if key not in base:
            raise ConfigurationError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_strict(base[key], value, here)
        elif isinstance(base[key], dict):
            raise ConfigurationError(f"config key {here} must be a mapping")
        else:
            out[key] = value
    return out


def _set_by_path(doc: dict, dotted: str, raw: str) -> None:
    """Apply one --set key=value override; the value parses as YAML."""
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot descend into config key: {dotted}")
    node[keys[-1]] = yaml.safe_load(raw)


class ExperimentConfig:
    """Resolved, validated experiment configuration."""

    def __init__(self, doc: dict):
        self.doc = _merge_strict(default_config(), doc)
        # materialize typed objects now so contradictions fail at load time
        self.network = self._network()
        self.schedule = make_schedule(self.doc["schedule"]["kind"],
                                      int(self.doc["schedule"]["T"]),
                                      tuple(self.doc["schedule"]["range"]))
        self.train_cfg = TrainConfig(**self.doc["train"])
        self.loss_cfg = LossConfig(**self.doc["loss"])
        self.scene_spec = SceneSpec(seed=self.doc["seed"],
                                    **{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in self.doc["data"]["scene"].items()})
        self.framework = self.doc["framework"]
        inf = dict(self.doc["inference"])
        self.inference = InferenceSpec(framework=self._inference_framework(inf), **inf)
        self.seed = int(self.doc["seed"])
        self._check_consistency()

    def _network(self) -> NetworkConfig:
        preset = self.doc["preset"]
        if preset not in PRESETS:
            raise ConfigurationError(
                f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        overrides = {k: tuple(v) if isinstance(v, list) else v
                     for k, v in self.doc["network"].items()}
        return PRESETS[preset](**overrides)

    def _inference_framework(self, inf: dict) -> str:
        # NCF mode implies the NCF framework; otherwise follow the experiment
        if inf.get("mode") == "NCF":
            return "NCF"
        return self.framework

    def _check_consistency(self):
        if self.framework not in ("CNF", "NCF", "plain"):
            raise ConfigurationError(f"framework: unknown framework {self.framework!r}")
        if self.framework == "NCF" and self.network.nn_input != "labels":
            raise ConfigurationError(
                "framework: NCF requires network.nn_input = 'labels'")
        if self.framework == "plain" and self.network.fit_target != "epsilon":
            raise ConfigurationError(
                "network.fit_target: only meaningful with a diffusion framework, "
                "not 'plain'")
        if self.inference.mode == "NCF" and self.framework != "NCF":
            raise ConfigurationError(
                "inference.mode: NCF inference requires framework = 'NCF'")

    @property
    def outdir(self) -> Path:
        out = Path(self.doc["output"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @property
    def data_path(self) -> Path:
        p = self.doc["data"]["path"]
        return Path(p) if p else self.outdir / "dataset"

    def snapshot(self, subdir: Path) -> Path:
        """Write the fully resolved config next to the run's outputs."""
        subdir.mkdir(parents=True, exist_ok=True)
        path = subdir / "config_resolved.yaml"
        path.write_text(yaml.safe_dump(self.doc, sort_keys=True), encoding="utf-8")
        return path


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must contain a mapping at top level")
    if args.preset:
        doc["preset"] = args.preset
    if args.seed is not None:
        doc["seed"] = args.seed
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _set_by_path(doc, key, raw)
    return ExperimentConfig(doc)


# ---------------------------------------------------------------------------
# Subcommands


def _load_split(cfg: ExperimentConfig, split: str):
    scenes = load_dataset(cfg.data_path, split)
    if not scenes:
        raise ConfigurationError(f"data.path: no {split!r} scenes in {cfg.data_path}")
    return scenes


def _eval_fn(cfg: ExperimentConfig, val_scenes, framework: str | None = None):
    fw = framework or cfg.framework
    if fw == "NCF":
        def fn(m):
            cm = ev.ConfusionMatrix.empty(m.num_classes)
            for sc in val_scenes:
                cm.accumulate(sc.labels,
                              infer_ncf(m, sc, cfg.schedule,
                                        cfg.inference.steps, cfg.inference.seed))
            return ev.metrics(cm).miou
        return fn
    spec = InferenceSpec(seed=cfg.inference.seed, framework=fw)
    return lambda m: ev.evaluate_scenes(m, val_scenes, cfg.schedule, spec).miou


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    n_train, n_val = cfg.doc["data"]["num_train"], cfg.doc["data"]["num_val"]
    scenes, splits = [], []
    for i in range(n_train + n_val):
        rng = np.random.default_rng([cfg.seed, i])
        scenes.append(synth_scene(cfg.scene_spec, rng))
        splits.append("train" if i < n_train else "val")
    save_dataset(scenes, splits, cfg.data_path)
    cfg.snapshot(cfg.data_path)
    print(f"wrote {n_train} train + {n_val} val scenes to {cfg.data_path}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    train_scenes = _load_split(cfg, "train")
    val_scenes = _load_split(cfg, "val")
    outdir = cfg.outdir / "train"
    cfg.snapshot(outdir)
    torch.manual_seed(cfg.seed)
    sample = train_scenes[0]
    num_classes = max(int(s.labels.max()) for s in train_scenes) + 1
    model = CDSegModel(cfg.network, sample.features.shape[1], num_classes)
    run = train_loop(model, train_scenes, cfg.schedule, cfg.loss_cfg, cfg.train_cfg,
                     outdir, framework=cfg.framework,
                     eval_fn=_eval_fn(cfg, val_scenes),
                     val_interval=cfg.doc["val_interval"],
                     max_steps=args.max_steps, resume=args.resume)
    print(f"trained {run['steps']} steps; best val mIoU "
          f"{run['best_metric']:.4f}; checkpoints in {outdir}")
    return 0


def _checkpoint_path(cfg: ExperimentConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    for name in ("best.pt", "last.pt"):
        p = cfg.outdir / "train" / name
        if p.exists():
            return p
    raise ConfigurationError(
        f"checkpoint: none given and no checkpoint found under {cfg.outdir / 'train'}")


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    model, _, _ = load_checkpoint(_checkpoint_path(cfg, args))
    val_scenes = _load_split(cfg, args.split)
    outdir = cfg.outdir / "eval"
    cfg.snapshot(outdir)
    report = ev.evaluate_scenes(model, val_scenes, cfg.schedule, cfg.inference)
    path = outdir / "metrics.json"
    path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    if args.save_predictions:
        for i, scene in enumerate(val_scenes):
            labels = predict(model, scene, cfg.schedule, cfg.inference)
            save_prediction(scene, labels, outdir / f"pred_{i:04d}.cdseg")
    print(f"mIoU {report.miou:.4f}  mAcc {report.macc:.4f}  "
          f"allAcc {report.allacc:.4f}  -> {path}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    val_scenes = _load_split(cfg, "val")
    outdir = cfg.outdir / f"sweep_{args.kind}"
    cfg.snapshot(outdir)
    if args.kind == "noise":
        model, _, _ = load_checkpoint(_checkpoint_path(cfg, args))
        spec = cfg.doc["sweep"]["noise"]
        result = ev.noise_sweep(model, val_scenes, cfg.schedule, spec["dists"],
                                [float(t) for t in spec["taus"]], cfg.inference,
                                seed=cfg.seed,
                                perturb_features=spec["perturb_features"])
    else:
        train_scenes = _load_split(cfg, "train")
        spec = cfg.doc["sweep"]["sparsity"]

        def train_fn(subset, seed):
            torch.manual_seed(seed)
            sample = subset[0]
            num_classes = max(int(s.labels.max()) for s in subset) + 1
            model = CDSegModel(cfg.network, sample.features.shape[1], num_classes)
            run_dir = outdir / f"train_n{len(subset)}_s{seed}"
            train_loop(model, subset, cfg.schedule, cfg.loss_cfg,
                       TrainConfig(**{**dataclasses.asdict(cfg.train_cfg),
                                      "seed": seed}),
                       run_dir, framework=cfg.framework, max_steps=args.max_steps)
            return model

        result = ev.sparsity_sweep(train_fn, train_scenes, val_scenes, cfg.schedule,
                                   [float(f) for f in spec["fractions"]],
                                   [int(s) for s in spec["seeds"]], cfg.inference)
    path = outdir / f"{args.kind}_sweep.json"
    ev.save_sweep(result, path)
    print(f"{len(result.cells)} cells -> {path}")
    return 0


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    train_scenes = _load_split(cfg, "train")
    val_scenes = _load_split(cfg, "val")
    outdir = cfg.outdir / "compare"
    cfg.snapshot(outdir)
    spec = cfg.doc["compare"]
    result = ev.framework_compare(
        cfg.network, train_scenes, val_scenes, cfg.schedule, cfg.loss_cfg,
        cfg.train_cfg, budget=int(spec["budget"]),
        val_interval=int(spec["val_interval"]), outdir=outdir,
        ncf_steps=int(spec["ncf_steps"]), seed=cfg.seed,
        frameworks=tuple(spec["frameworks"]))
    path = outdir / "compare.json"
    ev.save_sweep(result, path)
    for cell in result.cells:
        print(f"{cell['framework']}: best mIoU {cell['best_miou']:.4f}, "
              f"{cell['inference_counters']['nn_encoder']} encoder passes/scene")
    print(f"-> {path}")
    return 0


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    results_dir = Path(args.results) if args.results else cfg.outdir
    sweeps = sorted(results_dir.rglob("*sweep*.json")) + \
        sorted(results_dir.rglob("compare.json"))
    if not sweeps:
        raise ConfigurationError(f"results: no sweep files under {results_dir}")
    outdir = cfg.outdir / "plots"
    total = 0
    for path in sweeps:
        result = ev.load_sweep(path)
        files, msg = ev.emit_plots(result, outdir / path.stem)
        total += len(files)
        print(f"{path.name}: {msg}")
    print(f"{total} files -> {outdir}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdseg",
        description="Diffusion-assisted point-cloud segmentation experiments")
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="network preset (overrides config)")
    parser.add_argument("--seed", type=int, help="global seed (overrides config)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p = sub.add_parser("train", help="train a model on the dataset")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="val")
    p.add_argument("--save-predictions", action="store_true")
    p = sub.add_parser("sweep", help="run a robustness or sparsity sweep")
    p.add_argument("--kind", choices=("noise", "sparsity"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--max-steps", type=int, default=None)
    p = sub.add_parser("compare", help="train and compare framework variants")
    p = sub.add_parser("plot", help="render plots and tables from sweep results")
    p.add_argument("--results", help="directory containing sweep result files")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "compare": cmd_compare, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
