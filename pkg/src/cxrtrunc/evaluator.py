"""AUROC, average AUC, bootstrap confidence intervals and paired differences.

The bootstrap resamples example rows (all tasks jointly). Replicate ``r``
draws its indices from its own substream ``SeedSequence([seed, r])``, so
results do not depend on how replicates are scheduled. A replicate in which
a required task has only one class is redrawn from the same substream.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import EVAL_TASKS, OBSERVATIONS, LabelMatrix
from .errors import BootstrapError, InputError, UndefinedAUCError
from .kernels import auc_presorted_batch

log = logging.getLogger(__name__)

CHUNK = 1000


def _check_task_vectors(scores, truth):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise InputError(f"scores ({scores.size}) and truth ({truth.size}) differ in length")
    if not np.isfinite(scores).all():
        raise InputError("scores contain NaN or infinite values")
    if not np.isin(truth, (0, 1)).all():
        raise InputError("truth entries must be 0 or 1")
    return scores, truth.astype(np.uint8)


def auroc(scores, truth) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    scores, truth = _check_task_vectors(scores, truth)
    n_pos = int(truth.sum())
    if n_pos == 0 or n_pos == truth.size:
        raise UndefinedAUCError("AUROC is undefined when truth contains a single class")
    order = np.argsort(scores, kind="stable")
    ones = np.ones((1, scores.size), dtype=np.int64)
    return float(auc_presorted_batch(scores[order], truth[order], ones)[0])


def _average(per_task: dict) -> tuple[float, list[str]]:
    excluded = [t for t, v in per_task.items() if v is None or not np.isfinite(v)]
    values = [v for t, v in per_task.items() if t not in excluded]
    if not values:
        raise UndefinedAUCError("no task has a defined AUROC")
    return float(np.mean(values)), excluded


def avg_auc(per_task: dict) -> float:
    """Unweighted mean over tasks; undefined tasks (None/NaN) are excluded with a warning."""
    value, excluded = _average(per_task)
    if excluded:
        warnings.warn(f"average AUC excludes undefined task(s): {', '.join(excluded)}")
    return value


def per_task_auc(lm: LabelMatrix, tasks: Sequence[str] = EVAL_TASKS) -> dict[str, float | None]:
    out = {}
    for task in tasks:
        j = lm.column(task)
        try:
            out[task] = auroc(lm.scores[:, j], lm.truth[:, j])
        except UndefinedAUCError:
            warnings.warn(f"AUROC undefined for task {task!r} (single class); excluded")
            out[task] = None
    return out


# -- statistics that the bootstrap can evaluate from resample counts --------------


class TaskAUC:
    """AUROC of one task."""

    def __init__(self, task: str):
        self.task = task
        self.tasks = (task,)
        self.name = task

    def prepare(self, lm: LabelMatrix):
        j = lm.column(self.task)
        scores, truth = _check_task_vectors(lm.scores[:, j], lm.truth[:, j])
        order = np.argsort(scores, kind="stable")
        return scores[order], truth[order], order

    def from_counts(self, prepared, counts: np.ndarray) -> np.ndarray:
        scores, truth, order = prepared
        return auc_presorted_batch(scores, truth, np.ascontiguousarray(counts[:, order]))

    def __call__(self, lm: LabelMatrix) -> float:
        j = lm.column(self.task)
        return auroc(lm.scores[:, j], lm.truth[:, j])


class AverageAUC:
    """Unweighted mean AUROC over ``tasks``."""

    name = "avg_auc"

    def __init__(self, tasks: Sequence[str] = EVAL_TASKS):
        self.tasks = tuple(tasks)
        self._parts = [TaskAUC(t) for t in self.tasks]

    def prepare(self, lm: LabelMatrix):
        return [p.prepare(lm) for p in self._parts]

    def from_counts(self, prepared, counts: np.ndarray) -> np.ndarray:
        values = np.stack([p.from_counts(s, counts) for p, s in zip(self._parts, prepared)])
        return values.mean(axis=0)

    def __call__(self, lm: LabelMatrix) -> float:
        return float(np.mean([p(lm) for p in self._parts]))


class PairedAUCDifference:
    """``avg_auc(A) - avg_auc(B)`` over one shared resample."""

    name = "avg_auc_difference"

    def __init__(self, other_scores: np.ndarray, tasks: Sequence[str] = EVAL_TASKS):
        self.tasks = tuple(tasks)
        self.other_scores = np.asarray(other_scores, dtype=np.float64)
        self._avg = AverageAUC(self.tasks)

    def _other(self, lm: LabelMatrix) -> LabelMatrix:
        return LabelMatrix(self.other_scores, lm.truth, lm.task_names)

    def prepare(self, lm: LabelMatrix):
        return self._avg.prepare(lm), self._avg.prepare(self._other(lm))

    def from_counts(self, prepared, counts):
        a, b = prepared
        return self._avg.from_counts(a, counts) - self._avg.from_counts(b, counts)

    def __call__(self, lm: LabelMatrix) -> float:
        raise TypeError("PairedAUCDifference is only evaluated from shared resample counts")


# -- bootstrap ---------------------------------------------------------------------


@dataclass
class BootstrapResult:
    replicate_values: np.ndarray
    percentiles: tuple[float, float]
    seed: int
    point: float
    redraws: int = 0

    @property
    def n_replicates(self) -> int:
        return len(self.replicate_values)


def replicate_indices(n_examples: int, n_replicates: int, seed: int, truth_cols: np.ndarray | None = None,
                      max_redraws: int | None = None):
    """Yield ``(r, indices, redraws)`` for each replicate.

    ``truth_cols`` (n_examples x k) lists the tasks that must keep both
    classes; a replicate violating that is redrawn from its own substream.
    """
    max_redraws = 100 * n_replicates if max_redraws is None else max_redraws
    total = 0
    if truth_cols is not None and truth_cols.size:
        cols = np.asarray(truth_cols, dtype=np.int64)
    else:
        cols = None
    for r in range(n_replicates):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), r]))
        while True:
            idx = rng.integers(0, n_examples, n_examples)
            if cols is None:
                break
            pos = cols[idx].sum(axis=0)
            if np.all((pos > 0) & (pos < n_examples)):
                break
            total += 1
            if total > max_redraws:
                raise BootstrapError(
                    f"exceeded {max_redraws} redraws of single-class replicates; "
                    "the test set is too small or too unbalanced"
                )
        yield r, idx, total


def _bootstrap_values(statistic, lm: LabelMatrix, n: int, seed: int, tasks) -> tuple[np.ndarray, int]:
    if n < 1:
        raise InputError("n_replicates must be >= 1")
    N = lm.n_examples
    if N == 0:
        raise InputError("cannot bootstrap an empty label matrix")
    required = [t for t in tasks if t in lm.task_names]
    truth_cols = lm.truth[:, [lm.column(t) for t in required]] if required else None

    fast = hasattr(statistic, "from_counts")
    prepared = statistic.prepare(lm) if fast else None
    values = np.empty(n)
    redraws = 0
    counts = np.zeros((min(CHUNK, n), N), dtype=np.int64)
    filled = 0
    start = 0
    for r, idx, redraws in replicate_indices(N, n, seed, truth_cols):
        if fast:
            counts[filled] = np.bincount(idx, minlength=N)
            filled += 1
            if filled == counts.shape[0] or r == n - 1:
                values[start:start + filled] = statistic.from_counts(prepared, counts[:filled])
                start += filled
                filled = 0
        else:
            values[r] = statistic(lm.take(idx))
    if redraws:
        log.info("bootstrap redrew %d single-class replicate(s)", redraws)
    return values, redraws


def percentile_ci(values: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


def bootstrap_ci(statistic: Callable, lm: LabelMatrix, n: int = 1000, seed: int = 0,
                 tasks: Sequence[str] | None = None) -> BootstrapResult:
    """Percentile bootstrap (2.5th, 97.5th) of ``statistic`` over example rows.

    ``statistic`` is any callable taking a :class:`LabelMatrix`; the built-in
    :class:`TaskAUC`/:class:`AverageAUC` use the compiled count-based path.
    ``tasks`` lists the tasks that must stay two-class in every replicate
    (default: ``statistic.tasks`` or all columns).
    """
    if tasks is None:
        tasks = getattr(statistic, "tasks", lm.task_names)
    values, redraws = _bootstrap_values(statistic, lm, n, seed, tasks)
    point = float(statistic(lm))
    return BootstrapResult(values, percentile_ci(values), int(seed), point, redraws)


@dataclass
class PairedDifference:
    diff: float
    ci: tuple[float, float]
    significant: bool
    bootstrap: BootstrapResult

    def format(self) -> str:
        return f"{self.diff:.3f} ({self.ci[0]:.3f}, {self.ci[1]:.3f})"


def is_significant(ci: tuple[float, float]) -> bool:
    """Significant at the 0.05 level iff the 95% interval excludes zero."""
    lo, hi = ci
    return not (lo <= 0.0 <= hi)


def paired_difference(a: LabelMatrix, b: LabelMatrix, n: int = 1000, seed: int = 0,
                      tasks: Sequence[str] = EVAL_TASKS) -> PairedDifference:
    """``avg_auc(a) - avg_auc(b)`` with both models scored on every shared replicate."""
    if a.scores.shape != b.scores.shape or a.task_names != b.task_names:
        raise InputError("the two models were not scored on the same examples and tasks")
    if not np.array_equal(a.truth, b.truth):
        raise InputError("the two label matrices disagree on ground truth")
    if a.example_ids is not None and b.example_ids is not None and list(a.example_ids) != list(b.example_ids):
        raise InputError("the two label matrices list different examples")
    tasks = [t for t in tasks if t in a.task_names]
    defined = [t for t in tasks if 0 < a.truth[:, a.column(t)].sum() < a.n_examples]
    stat = PairedAUCDifference(b.scores, defined)
    values, redraws = _bootstrap_values(stat, a, n, seed, defined)
    point = AverageAUC(defined)(a) - AverageAUC(defined)(b)
    ci = percentile_ci(values)
    result = BootstrapResult(values, ci, int(seed), float(point), redraws)
    return PairedDifference(float(point), ci, is_significant(ci), result)


# -- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_task_auc: dict
    avg_auc: float
    ci: dict
    n_examples: int
    n_replicates: int
    seed: int
    excluded_tasks: list = field(default_factory=list)
    model: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = {k: list(v) for k, v in self.ci.items()}
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["ci"] = {k: tuple(v) for k, v in d["ci"].items()}
        return cls(**d)

    def csv_row(self) -> dict:
        lo, hi = self.ci["avg_auc"]
        row = {"model": self.model, "avg_auc": self.avg_auc, "auc_ci_lo": lo, "auc_ci_hi": hi,
               "n_examples": self.n_examples}
        row.update({f"auc_{t}": v for t, v in self.per_task_auc.items()})
        return row


def evaluate(lm: LabelMatrix, tasks: Sequence[str] = EVAL_TASKS, n_replicates: int = 1000, seed: int = 0,
             model: str = "") -> EvalReport:
    """Per-task and average AUROC with percentile bootstrap CIs from shared replicates."""
    per_task = per_task_auc(lm, tasks)
    value, excluded = _average(per_task)
    defined = [t for t in tasks if t not in excluded]
    stats = [TaskAUC(t) for t in defined] + [AverageAUC(defined)]
    prepared = [s.prepare(lm) for s in stats]
    truth_cols = lm.truth[:, [lm.column(t) for t in defined]]

    N = lm.n_examples
    values = np.empty((len(stats), n_replicates))
    counts = np.zeros((min(CHUNK, n_replicates), N), dtype=np.int64)
    filled = start = 0
    for r, idx, _ in replicate_indices(N, n_replicates, seed, truth_cols):
        counts[filled] = np.bincount(idx, minlength=N)
        filled += 1
        if filled == counts.shape[0] or r == n_replicates - 1:
            for i, (s, p) in enumerate(zip(stats, prepared)):
                values[i, start:start + filled] = s.from_counts(p, counts[:filled])
            start += filled
            filled = 0
    ci = {s.name: percentile_ci(values[i]) for i, s in enumerate(stats)}
    return EvalReport(per_task, value, ci, N, n_replicates, int(seed), excluded, model)


# -- prediction dumps -------------------------------------------------------------


def save_predictions(path: str | Path, ids: Sequence[str], probs: np.ndarray,
                     task_names: Sequence[str] = OBSERVATIONS) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", *task_names])
        for i, row in zip(ids, np.asarray(probs)):
            w.writerow([i, *(repr(float(v)) for v in row)])
    return path


def load_predictions(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1), header[1:]
