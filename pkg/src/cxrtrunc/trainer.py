"""Finetuning, checkpoint cadence and the top-k checkpoint ensemble.

Run directory layout::

    config.json           merged training configuration
    plan.json             truncation plan (rebuilds the architecture)
    run.json              seed, normalisation, plan hash, pretrained flag
    metrics.csv           step, per-task validation AUC, avg AUC (append-only)
    checkpoints/step_<N>.pt
    ensemble.json         selected members, written by build_ensemble
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import UnitNet
from .data import EVAL_TASKS, OBSERVATIONS, ImageDataset, LabelMatrix, NormalizationPolicy
from .errors import InputError, NonFiniteLossError, NotFoundError
from .evaluator import _average, per_task_auc
from .providers import BackboneProvider
from .seeding import derive_seed, seed_everything
from .truncation import TruncationPlan, instantiate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 3
    eval_every: int = 8192
    seed: int = 0
    ensemble_size: int = 10
    label_policy: str = "uncertain_as_negative"
    tasks: tuple = EVAL_TASKS
    deterministic: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.eval_every < 1:
            raise InputError("eval_every must be >= 1")
        if self.ensemble_size < 1:
            raise InputError("ensemble_size must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class CheckpointMeta:
    step: int
    per_task_auc: dict
    avg_auc: float
    artifact_path: str
    plan: str = ""

    def __post_init__(self):
        value, _ = _average(self.per_task_auc)
        if abs(value - self.avg_auc) > 1e-9:
            raise InputError(f"avg_auc {self.avg_auc} does not match the per-task mean {value}")


# -- loss and step -------------------------------------------------------------------


def masked_bce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over unmasked (example, task) cells."""
    losses = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")
    if mask is None:
        return losses.mean()
    mask = mask.to(logits.dtype)
    return (losses * mask).sum() / mask.sum()


def train_step(model: UnitNet, optimizer: torch.optim.Optimizer, images: torch.Tensor, targets: torch.Tensor,
               mask: torch.Tensor | None = None, step: int = 0, batch_id: int = 0) -> float | None:
    """One Adam update. Returns the loss, or ``None`` when every cell is masked."""
    if mask is not None and float(mask.sum()) == 0.0:
        warnings.warn(f"batch {batch_id} has every label masked; step skipped")
        return None
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = masked_bce(model(images), targets, mask)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(step, batch_id, value)
    loss.backward()
    optimizer.step()
    return value


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))


@torch.no_grad()
def predict(model: UnitNet, dataset: ImageDataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(dataset), batch_size):
        rows = np.arange(start, min(start + batch_size, len(dataset)))
        out.append(torch.sigmoid(model(dataset.tensor(rows))).numpy())
    if not out:
        return np.zeros((0, model.num_outputs))
    return np.concatenate(out).astype(np.float64)


def label_matrix(dataset: ImageDataset, probs: np.ndarray) -> LabelMatrix:
    ids = [Path(r.image_path).name for r in dataset.records]
    return LabelMatrix(probs, dataset.truth, list(OBSERVATIONS), ids)


def validate(model: UnitNet, dataset: ImageDataset, tasks: Sequence[str], batch_size: int = 64):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_task = per_task_auc(label_matrix(dataset, predict(model, dataset, batch_size)), tasks)
    avg, _ = _average(per_task)
    return per_task, avg


# -- run directory ---------------------------------------------------------------------


def _atomic_save(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


class MetricsLog:
    def __init__(self, path: Path, tasks: Sequence[str]):
        self.path = path
        self.tasks = list(tasks)
        if not path.exists():
            with path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(["step", *self.tasks, "avg_auc"])

    def append(self, step: int, per_task: dict, avg: float) -> None:
        with self.path.open("a", newline="") as fh:
            cells = ["" if per_task[t] is None else repr(per_task[t]) for t in self.tasks]
            csv.writer(fh, lineterminator="\n").writerow([step, *cells, repr(avg)])


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise NotFoundError(f"{run_dir} has no metrics.csv")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    run_dir: Path
    checkpoints: list[CheckpointMeta]
    total_steps: int
    normalization: NormalizationPolicy
    losses: list = field(default_factory=list)


def finetune(
    plan: TruncationPlan,
    config: TrainConfig,
    train: ImageDataset,
    valid: ImageDataset,
    run_dir: str | Path,
    pretrained: bool = False,
    provider: BackboneProvider | None = None,
) -> RunResult:
    """Train every parameter for ``config.epochs`` epochs.

    A checkpoint and validation AUC are recorded every ``eval_every`` steps and
    once more at the end unless the last step was already checkpointed.
    """
    if len(train) == 0 or len(valid) == 0:
        raise InputError("finetune needs non-empty train and validation splits")
    run_dir = Path(run_dir)
    if (run_dir / "metrics.csv").exists():
        raise InputError(f"{run_dir} already holds a training run; choose a fresh output directory")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    seed_everything(config.seed, config.deterministic)
    model = instantiate(plan, pretrained=pretrained, provider=provider, seed=derive_seed(config.seed, "init"))
    optimizer = make_optimizer(model, config)

    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    plan.save(run_dir / "plan.json")
    meta = {
        "seed": config.seed,
        "plan": plan.name,
        "plan_hash": plan.content_hash(),
        "pretrained": pretrained,
        "normalization": train.normalization.to_dict(),
        "image_size": train.image_size,
        "label_policy": config.label_policy,
        "hyperparameters": config.to_dict(),
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2) + "\n")
    metrics = MetricsLog(run_dir / "metrics.csv", config.tasks)

    data_seed = derive_seed(config.seed, "data")
    checkpoints: list[CheckpointMeta] = []
    losses = []
    step = 0
    last_saved = -1

    def checkpoint():
        nonlocal last_saved
        per_task, avg = validate(model, valid, config.tasks, config.eval_batch_size)
        path = ckpt_dir / f"step_{step}.pt"
        _atomic_save({"model_state": model.state_dict(), "step": step, "per_task_auc": per_task,
                      "avg_auc": avg, "plan": plan.name}, path)
        metrics.append(step, per_task, avg)
        checkpoints.append(CheckpointMeta(step, per_task, avg, str(path), plan.name))
        last_saved = step
        log.info("step %d: validation avg AUC %.4f", step, avg)

    for epoch in range(config.epochs):
        for batch_id, (_, x, y, mask) in enumerate(train.batches(config.batch_size, data_seed, epoch)):
            loss = train_step(model, optimizer, x, y, mask, step=step, batch_id=batch_id)
            if loss is None:
                continue
            losses.append(loss)
            step += 1
            if step % config.eval_every == 0:
                checkpoint()
    if last_saved != step:
        checkpoint()
    return RunResult(run_dir, checkpoints, step, train.normalization, losses)


# -- ensembles -------------------------------------------------------------------------


def load_checkpoints(run_dir: str | Path) -> list[CheckpointMeta]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise NotFoundError(f"run directory {run_dir} does not exist")
    plan_name = ""
    if (run_dir / "plan.json").exists():
        plan_name = json.loads((run_dir / "plan.json").read_text())["name"]
    metas = []
    try:
        rows = read_metrics(run_dir)
    except NotFoundError:
        rows = []
    tasks = None
    for row in rows:
        step = int(row["step"])
        path = run_dir / "checkpoints" / f"step_{step}.pt"
        if not path.exists():
            continue
        tasks = tasks or [k for k in row if k not in ("step", "avg_auc")]
        per_task = {t: (float(row[t]) if row[t] else None) for t in tasks}
        metas.append(CheckpointMeta(step, per_task, float(row["avg_auc"]), str(path), plan_name))
    if not metas:
        raise NotFoundError(f"no checkpoints recorded in {run_dir}")
    return metas


def load_model(plan: TruncationPlan, checkpoint_path: str | Path) -> UnitNet:
    model = instantiate(plan)
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    model.load_state_dict(state["model_state"])
    model.eval()
    return model


@dataclass
class EnsembleModel:
    members: list[CheckpointMeta]
    plan: TruncationPlan | None = None

    def __post_init__(self):
        steps = [m.step for m in self.members]
        if len(set(steps)) != len(steps):
            raise InputError("ensemble members must have distinct steps")

    def models(self) -> list[UnitNet]:
        if self.plan is None:
            raise InputError("ensemble has no plan to rebuild members from")
        return [load_model(self.plan, m.artifact_path) for m in self.members]

    def predict(self, dataset: ImageDataset, batch_size: int = 64) -> np.ndarray:
        return combine([predict(m, dataset, batch_size) for m in self.models()])

    def to_dict(self) -> dict:
        return {"plan": self.plan.name if self.plan else "", "members": [asdict(m) for m in self.members]}


def combine(member_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean of member probabilities.

    A running mean is used so that identical members reproduce the single
    member's prediction bit for bit.
    """
    if not member_probs:
        raise InputError("an ensemble needs at least one member")
    mean = np.array(member_probs[0], dtype=np.float64)
    for i, p in enumerate(member_probs[1:], start=2):
        mean += (np.asarray(p, dtype=np.float64) - mean) / i
    return mean


def select_top(checkpoints: Sequence[CheckpointMeta], k: int) -> list[CheckpointMeta]:
    """Top ``k`` by avg AUC; ties go to the later step."""
    ranked = sorted(checkpoints, key=lambda m: (m.avg_auc, m.step), reverse=True)
    return ranked[:k]


def build_ensemble(run_dir: str | Path, k: int = 10) -> EnsembleModel:
    run_dir = Path(run_dir)
    members = select_top(load_checkpoints(run_dir), k)
    plan = TruncationPlan.load(run_dir / "plan.json") if (run_dir / "plan.json").exists() else None
    ensemble = EnsembleModel(members, plan)
    (run_dir / "ensemble.json").write_text(json.dumps(ensemble.to_dict(), indent=2) + "\n")
    return ensemble


def run_metadata(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise NotFoundError(f"{run_dir} is not a run directory (no run.json)")
    return json.loads(path.read_text())
