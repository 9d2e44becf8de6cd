"""Losses, multi-task balancing, optimizer plumbing, and the training loop.

Randomness is split across dedicated numpy Generators (scene order, timestep
draws, noise draws, random loss weights) so each stream can be replayed
independently; torch's RNG only touches parameter init and stochastic depth.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dm
from .diffusion import ConfigurationError, DiffusionSchedule
from .geometry import PointCloud, concat_clouds, voxelize
from .nets import CDSegModel, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("EW", "RLW", "UW", "GLS")
FRAMEWORKS = ("CNF", "NCF", "plain")
GLS_FLOOR = 1e-12
# parameters trained at the reduced block learning rate
_BLOCK_MARKERS = (".blocks.", "ffm.")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0  # weight on the Lovasz term inside the segmentation loss
    strategy: str = "GLS"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lam must be >= 0, got {self.lam}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown loss strategy: {self.strategy!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    block_lr: float = 0.0002
    weight_decay: float = 0.005
    batch_size: int = 8
    epochs: int = 1
    lr_schedule: str = "cosine"
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.block_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_schedule != "cosine":
            raise ConfigurationError(f"unknown lr schedule: {self.lr_schedule!r}")


@dataclass
class StepReport:
    step: int
    loss_nn: float
    loss_cn: float
    total: float
    weights: tuple
    grad_norm: float
    lr: float
    ok: bool = True
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# Losses


def noise_loss(eps_pred, eps_true) -> torch.Tensor:
    """Mean squared error over all elements."""
    pred = torch.as_tensor(eps_pred)
    true = torch.as_tensor(np.asarray(eps_true), dtype=pred.dtype)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(true.shape)}")
    return ((pred - true) ** 2).mean()


def baseline_nn_loss(nn_output, clean_input) -> torch.Tensor:
    """Reconstruction MSE for the no-diffusion baseline (same form as noise_loss)."""
    return noise_loss(nn_output, clean_input)


def ce_loss(logits, labels) -> torch.Tensor:
    """Mean cross-entropy over labeled points; label -1 is excluded."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    mask = labels >= 0
    if not bool(mask.any()):
        log.warning("ce_loss: no labeled points; returning 0")
        return logits.sum() * 0.0
    lp = torch.log_softmax(logits[mask], dim=1)
    return -lp.gather(1, labels[mask].unsqueeze(1)).mean()


def _lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss."""
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1.0 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(fg_sorted) > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax_loss(logits, labels) -> torch.Tensor:
    """Lovasz-softmax: mean over classes present among labeled points."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    mask = labels >= 0
    if not bool(mask.any()):
        log.warning("lovasz_softmax_loss: no labeled points; returning 0")
        return logits.sum() * 0.0
    probs = torch.softmax(logits[mask], dim=1)
    labels = labels[mask]
    losses = []
    for c in labels.unique():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        m_sorted, order = torch.sort(errors, descending=True)
        losses.append(m_sorted @ _lovasz_grad(fg[order]))
    return torch.stack(losses).mean()


def combine_losses(strategy: str, losses, state=None, rng: np.random.Generator | None = None):
    """Balance per-task losses; returns (total, weights).

    EW sums; RLW draws fresh softmax-normal weights; UW uses learnable
    log-variances in `state`; GLS takes the geometric mean.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown loss strategy: {strategy!r}")
    ls = [torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
          for v in losses]
    n = len(ls)
    if strategy == "EW":
        return sum(ls), tuple(1.0 for _ in ls)
    if strategy == "RLW":
        if rng is None:
            raise ConfigurationError("RLW needs a random generator")
        z = rng.standard_normal(n)
        w = np.exp(z - z.max())
        w /= w.sum()
        return sum(float(wi) * li for wi, li in zip(w, ls)), tuple(float(x) for x in w)
    if strategy == "UW":
        if state is None:
            raise ConfigurationError("UW needs its learnable state")
        total = sum(torch.exp(-state[i]) * ls[i] + state[i] for i in range(n))
        return total, tuple(float(torch.exp(-s.detach())) for s in state[:n])
    # GLS
    clamped = []
    for li in ls:
        if float(li.detach()) <= 0:
            log.warning("GLS: nonpositive loss %s clamped to %g",
                        float(li.detach()), GLS_FLOOR)
        clamped.append(torch.clamp(li, min=GLS_FLOOR))
    total = torch.ones((), dtype=clamped[0].dtype)
    for li in clamped:
        total = total * li ** (1.0 / n)
    weights = tuple(float(total.detach()) / (n * max(float(li.detach()), GLS_FLOOR))
                    for li in clamped)
    return total, weights


# ---------------------------------------------------------------------------
# Optimizer


def make_optimizer(model: CDSegModel, cfg: TrainConfig, extra_params=()):
    """AdamW with attention/fusion blocks at block_lr and the rest at lr."""
    block, base = [], []
    for name, p in model.named_parameters():
        (block if any(m in name or name.startswith(m.strip(".")) for m in _BLOCK_MARKERS)
         else base).append(p)
    groups = [{"params": base, "lr": cfg.lr},
              {"params": block, "lr": cfg.block_lr}]
    if extra_params:
        groups.append({"params": list(extra_params), "lr": cfg.lr, "weight_decay": 0.0})
    opt = torch.optim.AdamW(groups, betas=(0.9, 0.999), eps=1e-8,
                            weight_decay=cfg.weight_decay)
    for g in opt.param_groups:
        g["base_lr"] = g["lr"]
    return opt


def set_cosine_lr(optimizer, step: int, total_steps: int) -> float:
    frac = min(step, total_steps) / max(total_steps, 1)
    factor = 0.5 * (1.0 + math.cos(math.pi * frac))
    for g in optimizer.param_groups:
        g["lr"] = g["base_lr"] * factor
    return factor


# ---------------------------------------------------------------------------
# Single optimization step


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows of unlabeled (-1) points are all-zero."""
    out = np.zeros((len(labels), num_classes))
    mask = labels >= 0
    out[mask, labels[mask]] = 1.0
    return out


def nn_signal(batch: PointCloud, model: CDSegModel) -> np.ndarray:
    """The array the noise branch diffuses, per the configured input source."""
    kind = model.config.nn_input
    if kind == "features":
        return batch.features
    if kind == "labels":
        return one_hot(batch.labels, model.num_classes)
    return batch.positions


def nn_input(c_t: np.ndarray, batch: PointCloud, model: CDSegModel) -> np.ndarray:
    if model.config.nn_input == "features":
        return c_t
    return np.concatenate([c_t, batch.features], axis=1)


def _per_element_q_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                          batch: PointCloud, sched: DiffusionSchedule) -> np.ndarray:
    abar = np.array([sched.alpha_bar_at(int(ti)) for ti in t])
    per_point = np.repeat(abar, batch.batch_sizes())[:, None]
    return np.sqrt(per_point) * x0 + np.sqrt(1.0 - per_point) * eps


@dataclass
class TrainerState:
    optimizer: object
    total_steps: int
    rngs: dict
    step: int = 0
    uw_state: torch.Tensor | None = None


def init_trainer(model: CDSegModel, train_cfg: TrainConfig, loss_cfg: LossConfig,
                 total_steps: int) -> TrainerState:
    uw = None
    extra = ()
    if loss_cfg.strategy == "UW":
        uw = torch.zeros(2, dtype=torch.float64, requires_grad=True)
        extra = (uw,)
    opt = make_optimizer(model, train_cfg, extra)
    rngs = {name: np.random.default_rng([train_cfg.seed, i])
            for i, name in enumerate(("order", "t", "eps", "rlw"))}
    return TrainerState(optimizer=opt, total_steps=total_steps, rngs=rngs, uw_state=uw)


def train_step(model: CDSegModel, batch: PointCloud, sched: DiffusionSchedule,
               loss_cfg: LossConfig, train_cfg: TrainConfig, state: TrainerState,
               framework: str = "CNF") -> StepReport:
    """Forward both branches, balance the losses, apply one AdamW update."""
    if framework not in FRAMEWORKS:
        raise ConfigurationError(f"unknown framework: {framework!r}")
    signal = nn_signal(batch, model)
    b = batch.num_batches
    if framework == "plain":
        t = np.zeros(b, dtype=np.int64)
        c_t = signal
        target = signal
    else:
        t = state.rngs["t"].integers(1, sched.T + 1, b)
        eps = state.rngs["eps"].standard_normal(signal.shape)
        c_t = _per_element_q_sample(signal, t, eps, batch, sched)
        target = signal if model.config.fit_target == "x0" else eps

    eps_pred, bottleneck = model.nn_forward(
        nn_input(c_t, batch, model), batch.positions, batch.offsets, t)
    loss_nn = noise_loss(eps_pred, target)
    logits = model.cn_forward(batch.features, batch.positions, batch.offsets, bottleneck)
    loss_cn = ce_loss(logits, batch.labels)
    if loss_cfg.lam:
        loss_cn = loss_cn + loss_cfg.lam * lovasz_softmax_loss(logits, batch.labels)
    total, weights = combine_losses(loss_cfg.strategy, [loss_nn, loss_cn],
                                    state=state.uw_state, rng=state.rngs["rlw"])

    lr = set_cosine_lr(state.optimizer, state.step, state.total_steps)
    report = StepReport(step=state.step, loss_nn=float(loss_nn.detach()),
                        loss_cn=float(loss_cn.detach()),
                        total=float(total.detach()), weights=weights, grad_norm=0.0,
                        lr=lr * train_cfg.lr)
    if not math.isfinite(report.total):
        report.ok = False
        report.message = (f"non-finite loss at step {state.step}: "
                          f"nn={report.loss_nn} cn={report.loss_cn}")
        log.error(report.message)
        state.step += 1
        return report

    state.optimizer.zero_grad()
    total.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    if train_cfg.grad_clip is not None:
        gnorm = torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
    else:
        gnorm = torch.linalg.vector_norm(
            torch.stack([p.grad.norm() for p in params if p.grad is not None]))
    report.grad_norm = float(gnorm)
    state.optimizer.step()
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# Training loop


def prepare_scenes(scenes: list[PointCloud], grid: float) -> list[PointCloud]:
    """Voxelize once up front; training operates on voxel points."""
    return [voxelize(s, grid)[0] for s in scenes]


def train_loop(model: CDSegModel, train_scenes: list[PointCloud], sched: DiffusionSchedule,
               loss_cfg: LossConfig, train_cfg: TrainConfig, outdir,
               framework: str = "CNF", eval_fn=None, val_interval: int | None = None,
               max_steps: int | None = None, stop_step: int | None = None,
               resume: bool = False) -> dict:
    """Epoch loop with seeded shuffling, validation, and resumable checkpoints.

    eval_fn(model) -> float is called every val_interval steps; the best
    checkpoint by that metric is kept alongside the latest one.  max_steps
    shortens the schedule horizon; stop_step interrupts without changing it,
    so a resumed run replays the uninterrupted trajectory exactly.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    scenes = prepare_scenes(train_scenes, model.config.grid_size)
    n = len(scenes)
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = train_cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    state = init_trainer(model, train_cfg, loss_cfg, total_steps)
    best = -math.inf
    history = []
    perm = None
    last_path, best_path = outdir / "last.pt", outdir / "best.pt"

    if resume and last_path.exists():
        from .nets import load_checkpoint  # deferred to keep import graph flat

        prev, _, extra = load_checkpoint(last_path)
        model.load_state_dict(prev.state_dict())
        state.optimizer.load_state_dict(extra["optimizer"])
        for g in state.optimizer.param_groups:
            g.setdefault("base_lr", g["lr"])
        for name, st in extra["rng_states"].items():
            state.rngs[name].bit_generator.state = st
        torch.set_rng_state(extra["torch_rng"])
        if state.uw_state is not None and extra.get("uw_state") is not None:
            with torch.no_grad():
                state.uw_state.copy_(extra["uw_state"])
        state.step = extra["step"]
        best = extra["best_metric"]
        history = extra["history"]
        perm = np.asarray(extra["perm"]) if extra["perm"] is not None else None

    def save(path, metric=None):
        save_checkpoint(path, model, schedule=sched, extra={
            "step": state.step,
            "optimizer": state.optimizer.state_dict(),
            "rng_states": {k: g.bit_generator.state for k, g in state.rngs.items()},
            "torch_rng": torch.get_rng_state(),
            "uw_state": None if state.uw_state is None else state.uw_state.detach().clone(),
            "best_metric": best,
            "history": history,
            "perm": None if perm is None else perm.tolist(),
            "metric": metric,
            "framework": framework,
        })

    log_path = outdir / "train_log.jsonl"
    with log_path.open("a" if resume else "w", encoding="utf-8") as logf:
        while state.step < total_steps:
            pos = state.step % steps_per_epoch
            if pos == 0 or perm is None:
                perm = state.rngs["order"].permutation(n)
            if stop_step is not None and state.step >= stop_step:
                break  # simulated interruption; the final save still runs
            batch = concat_clouds([scenes[i] for i in perm[pos * bs:(pos + 1) * bs]])
            report = train_step(model, batch, sched, loss_cfg, train_cfg, state, framework)
            logf.write(report.to_json() + "\n")
            at_end = state.step >= total_steps
            if eval_fn is not None and val_interval and (state.step % val_interval == 0 or at_end):
                metric = float(eval_fn(model))
                history.append({"step": state.step, "metric": metric})
                if metric > best:
                    best = metric
                    save(best_path, metric)
                save(last_path, metric)
        save(last_path)

    return {"steps": state.step, "best_metric": best, "history": history,
            "log_path": str(log_path), "last": str(last_path),
            "best": str(best_path) if best_path.exists() else None}
