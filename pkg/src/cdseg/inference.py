"""Inference modes: single-step, multi-step (averaged or final), and the
iterative label-diffusion baseline.

All modes voxelize the input at the model's grid, predict on voxel points,
and copy each voxel's label back to its member points.  Model call counters
make the cost difference between the single-step path and the iterative
baseline directly assertable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion as dm
from .diffusion import ConfigurationError, DiffusionSchedule
from .geometry import PointCloud, PoolingMap, save_cloud, voxelize
from .nets import CDSegModel
from .training import nn_input, nn_signal

MODES = ("SSI", "MSAI", "MSFI", "NCF")
FRAMEWORKS = ("CNF", "NCF", "plain")


@dataclass(frozen=True)
class InferenceSpec:
    mode: str = "SSI"
    steps: int = 1
    seed: int = 0
    framework: str = "CNF"
    redraw: bool = False  # multi-step: fresh noise per ladder step vs annealing

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown inference mode: {self.mode!r}")
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(f"unknown framework: {self.framework!r}")
        if self.mode == "SSI" and self.steps != 1:
            raise ConfigurationError("single-step mode requires steps = 1")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.mode == "NCF" and self.framework != "NCF":
            raise ConfigurationError("label-diffusion mode requires the NCF framework")


def _voxelized(model: CDSegModel, cloud: PointCloud) -> tuple[PointCloud, PoolingMap]:
    return voxelize(cloud, model.config.grid_size)


def _signal_shape(model: CDSegModel, vox: PointCloud) -> tuple[int, int]:
    return (vox.num_points, model.nn_channels)


@torch.no_grad()
def infer_single_step(model: CDSegModel, cloud: PointCloud, sched: DiffusionSchedule,
                      seed: int = 0, framework: str = "CNF") -> np.ndarray:
    """One noise-branch encoder pass at t = T, fused into one CN pass."""
    model.eval()
    vox, pmap = _voxelized(model, cloud)
    if framework == "plain":
        c = nn_signal(vox, model)
        t = np.zeros(vox.num_batches, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        c = rng.standard_normal(_signal_shape(model, vox))
        t = np.full(vox.num_batches, sched.T, dtype=np.int64)
    bott = model.nn_encode(nn_input(c, vox, model), vox.positions, vox.offsets, t)
    logits = model.cn_forward(vox.features, vox.positions, vox.offsets, bott)
    labels = logits.argmax(dim=1).numpy()
    return labels[pmap.parent]


@torch.no_grad()
def infer_multi_step(model: CDSegModel, cloud: PointCloud, sched: DiffusionSchedule,
                     steps: int, mode: str, seed: int = 0,
                     redraw: bool = False) -> np.ndarray:
    """Iterate the noise branch down a DDIM ladder, collecting CN logits.

    "MSAI" averages the per-step logits, "MSFI" keeps the final step's.
    With steps = 1 both reduce to the single-step output exactly.
    """
    if mode not in ("MSAI", "MSFI"):
        raise ConfigurationError(f"multi-step mode must be MSAI or MSFI, got {mode!r}")
    model.eval()
    vox, pmap = _voxelized(model, cloud)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(_signal_shape(model, vox))
    ladder = dm.ddim_timesteps(sched.T, steps)
    collected = None
    for i, t in enumerate(ladder):
        t_vec = np.full(vox.num_batches, t, dtype=np.int64)
        eps_pred, bott = model.nn_forward(nn_input(x, vox, model),
                                          vox.positions, vox.offsets, t_vec)
        logits = model.cn_forward(vox.features, vox.positions, vox.offsets, bott)
        if mode == "MSAI":
            collected = logits if collected is None else collected + logits
        else:
            collected = logits
        if i + 1 < len(ladder):
            if redraw:
                x = rng.standard_normal(x.shape)
            else:
                x = dm.ddim_step(x, eps_pred.numpy(), t, ladder[i + 1], sched)
    if mode == "MSAI":
        collected = collected / len(ladder)
    labels = collected.argmax(dim=1).numpy()
    return labels[pmap.parent]


def ddim_label_trajectory(x: np.ndarray, sched: DiffusionSchedule, steps: int,
                          eps_fn) -> np.ndarray:
    """Deterministic reverse trajectory over a label field.

    eps_fn(x_t, t) -> predicted noise; the final hop lands on the x0 estimate.
    """
    ladder = dm.ddim_timesteps(sched.T, steps) + [0]
    for t, t_next in zip(ladder, ladder[1:]):
        x = dm.ddim_step(x, eps_fn(x, t), t, t_next, sched)
    return x


@torch.no_grad()
def infer_ncf(model: CDSegModel, cloud: PointCloud, sched: DiffusionSchedule,
              steps: int, seed: int = 0) -> np.ndarray:
    """Iteratively denoise a Gaussian label field conditioned on the features."""
    if model.config.nn_input != "labels":
        raise ConfigurationError(
            "label-field inference requires a model trained with nn_input='labels'")
    model.eval()
    vox, pmap = _voxelized(model, cloud)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((vox.num_points, model.num_classes))

    def eps_fn(x, t):
        t_vec = np.full(vox.num_batches, t, dtype=np.int64)
        eps_pred, _ = model.nn_forward(nn_input(x, vox, model),
                                       vox.positions, vox.offsets, t_vec)
        return eps_pred.numpy()

    x = ddim_label_trajectory(x0, sched, steps, eps_fn)
    return x.argmax(axis=1)[pmap.parent]


def predict(model: CDSegModel, cloud: PointCloud, sched: DiffusionSchedule,
            spec: InferenceSpec) -> np.ndarray:
    """Dispatch on the inference spec; output labels lie in [0, num_classes)."""
    if spec.framework == "plain" or (spec.framework == "CNF" and spec.mode == "SSI"):
        return infer_single_step(model, cloud, sched, spec.seed, spec.framework)
    if spec.mode in ("MSAI", "MSFI"):
        return infer_multi_step(model, cloud, sched, spec.steps, spec.mode,
                                spec.seed, spec.redraw)
    return infer_ncf(model, cloud, sched, spec.steps, spec.seed)


def save_prediction(cloud: PointCloud, labels: np.ndarray, path,
                    logits: np.ndarray | None = None) -> None:
    """Write the cloud with predicted labels; optional per-point logits sidecar."""
    if len(labels) != cloud.num_points:
        raise ValueError(f"{len(labels)} labels for {cloud.num_points} points")
    out = cloud.copy()
    out.labels = np.asarray(labels, dtype=np.int64)
    save_cloud(out, path)
    if logits is not None:
        np.savetxt(str(path) + ".logits", logits, fmt="%.9g")
