"""CheXpert-style manifests, label policies, normalisation and batching."""

from __future__ import annotations

import csv
import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import EmptyDatasetError, InputError, RowError, SchemaError
from .seeding import numpy_rng

OBSERVATIONS = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)
EVAL_TASKS = ("Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion", "No Finding")
PATH_COLUMN = "Path"
VIEW_COLUMN = "Frontal/Lateral"
STD_FLOOR = 1e-6


class Label(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNCERTAIN = "uncertain"
    MISSING = "missing"


_CELL = {
    "1.0": Label.POSITIVE, "1": Label.POSITIVE,
    "0.0": Label.NEGATIVE, "0": Label.NEGATIVE,
    "-1.0": Label.UNCERTAIN, "-1": Label.UNCERTAIN,
    "": Label.MISSING,
}
_CSV_VALUE = {Label.POSITIVE: "1.0", Label.NEGATIVE: "0.0", Label.UNCERTAIN: "-1.0", Label.MISSING: ""}

LABEL_POLICIES = ("uncertain_as_negative", "uncertain_as_positive", "drop_uncertain")


@dataclass(frozen=True)
class StudyRecord:
    image_path: str
    view: str
    labels: tuple[Label, ...]

    def __post_init__(self):
        if len(self.labels) != len(OBSERVATIONS):
            raise ValueError(f"expected {len(OBSERVATIONS)} labels, got {len(self.labels)}")
        if self.view not in ("frontal", "lateral"):
            raise ValueError(f"view must be frontal or lateral, got {self.view!r}")


# -- manifests -----------------------------------------------------------------


def load_manifest(path: str | Path, root: str | Path | None = None) -> list[StudyRecord]:
    """Read a manifest CSV. Relative image paths resolve against ``root``
    (default: the manifest's directory). Extra columns are ignored."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (PATH_COLUMN, VIEW_COLUMN, *OBSERVATIONS):
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        for row in reader:
            line = reader.line_num
            labels = []
            for obs in OBSERVATIONS:
                raw = (row[obs] or "").strip()
                try:
                    labels.append(_CELL[raw])
                except KeyError:
                    raise RowError(line, f"unparsable value {raw!r} in column {obs!r}") from None
            view = (row[VIEW_COLUMN] or "").strip().lower()
            if view not in ("frontal", "lateral"):
                raise RowError(line, f"unparsable view {row[VIEW_COLUMN]!r}")
            image = Path(row[PATH_COLUMN])
            if not image.is_absolute():
                image = root / image
            records.append(StudyRecord(str(image), view, tuple(labels)))
    return records


def write_manifest(records: Sequence[StudyRecord], path: str | Path, root: str | Path | None = None) -> Path:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([PATH_COLUMN, VIEW_COLUMN, *OBSERVATIONS])
        for r in records:
            p = Path(r.image_path)
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            w.writerow([p.as_posix(), r.view.capitalize(), *(_CSV_VALUE[l] for l in r.labels)])
    return path


def resolve_labels(records: Sequence[StudyRecord], policy: str = "uncertain_as_negative"):
    """Binary targets and a loss mask, both ``(n, 14)`` float32.

    Missing labels count as negative. Only ``drop_uncertain`` produces mask
    zeros, exactly at the uncertain entries.
    """
    if policy not in LABEL_POLICIES:
        raise InputError(f"unknown label policy {policy!r}; choose from {LABEL_POLICIES}")
    n = len(records)
    targets = np.zeros((n, len(OBSERVATIONS)), dtype=np.float32)
    mask = np.ones_like(targets)
    for i, r in enumerate(records):
        for j, lab in enumerate(r.labels):
            if lab is Label.POSITIVE:
                targets[i, j] = 1.0
            elif lab is Label.UNCERTAIN:
                if policy == "uncertain_as_positive":
                    targets[i, j] = 1.0
                elif policy == "drop_uncertain":
                    mask[i, j] = 0.0
    return targets, mask


def evaluation_truth(records: Sequence[StudyRecord], policy: str = "uncertain_as_negative") -> np.ndarray:
    # masking has no meaning for AUROC truth; dropped cells fall back to negative
    targets, _ = resolve_labels(records, "uncertain_as_negative" if policy == "drop_uncertain" else policy)
    return targets.astype(np.int8)


# -- label matrices ----------------------------------------------------------------


@dataclass
class LabelMatrix:
    """Scores and binary truth for ``n_examples x n_tasks``."""

    scores: np.ndarray
    truth: np.ndarray
    task_names: list[str]
    example_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth)
        if self.scores.ndim == 1:
            self.scores = self.scores[:, None]
        if self.truth.ndim == 1:
            self.truth = self.truth[:, None]
        if self.scores.shape != self.truth.shape:
            raise InputError(f"scores {self.scores.shape} and truth {self.truth.shape} differ in shape")
        if not np.isin(self.truth, (0, 1)).all():
            raise InputError("truth entries must be 0 or 1")
        self.truth = self.truth.astype(np.int8)
        self.task_names = list(self.task_names)
        if len(self.task_names) != self.scores.shape[1]:
            raise InputError("task_names length does not match the number of columns")
        if self.example_ids is not None and len(self.example_ids) != self.scores.shape[0]:
            raise InputError("example_ids length does not match the number of rows")

    @property
    def n_examples(self) -> int:
        return self.scores.shape[0]

    def column(self, task: str) -> int:
        try:
            return self.task_names.index(task)
        except ValueError:
            raise InputError(f"unknown task {task!r}") from None

    def take(self, rows) -> "LabelMatrix":
        rows = np.asarray(rows)
        ids = None if self.example_ids is None else [self.example_ids[i] for i in rows]
        return LabelMatrix(self.scores[rows], self.truth[rows], self.task_names, ids)

    def select(self, tasks: Sequence[str]) -> "LabelMatrix":
        cols = [self.column(t) for t in tasks]
        return LabelMatrix(self.scores[:, cols], self.truth[:, cols], list(tasks), self.example_ids)


# -- normalisation -------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationPolicy:
    mode: str
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if self.mode not in ("imagenet_stats", "dataset_stats"):
            raise ValueError(f"unknown normalisation mode {self.mode!r}")
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std need one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive for every channel")

    def _stats(self, x: torch.Tensor):
        shape = (-1, 1, 1)
        mean = torch.tensor(self.mean, dtype=x.dtype).view(shape)
        std = torch.tensor(self.std, dtype=x.dtype).view(shape)
        return mean, std

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        return (x - mean) / std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        return x * std + mean

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationPolicy":
        return cls(d["mode"], tuple(d["mean"]), tuple(d["std"]))


IMAGENET = NormalizationPolicy("imagenet_stats", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def select_normalization(pretrained: bool, dataset_stats: NormalizationPolicy | None = None,
                         override: str | None = None) -> NormalizationPolicy:
    """ImageNet statistics for pretrained runs, dataset statistics otherwise."""
    mode = override or ("imagenet_stats" if pretrained else "dataset_stats")
    if mode == "imagenet_stats":
        return IMAGENET
    if dataset_stats is None:
        raise InputError("dataset_stats normalisation requested but no statistics were computed")
    return dataset_stats


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Grayscale image as float32 in [0, 1]; 8- and 16-bit inputs supported."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64)
            scale = 65535.0
        else:
            if img.mode != "L":
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.float64)
            scale = 255.0
    if size is not None and arr.shape != (size, size):
        pil = Image.fromarray((arr / scale).astype(np.float32), mode="F")
        arr = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)
        scale = 1.0
    return (arr / scale).astype(np.float32)


def compute_dataset_stats(records: Sequence[StudyRecord], sample_cap: int | None = None, seed: int = 0,
                          size: int | None = None) -> NormalizationPolicy:
    """Pixel mean and population std over (a seeded sample of) the images."""
    idx = np.arange(len(records))
    if sample_cap is not None and sample_cap < len(idx):
        idx = np.sort(numpy_rng(seed, "stats").choice(len(idx), size=sample_cap, replace=False))
    total = 0.0
    total_sq = 0.0
    count = 0
    for i in idx:
        try:
            arr = load_image(records[i].image_path, size).astype(np.float64)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {records[i].image_path}: {exc}")
            continue
        total += arr.sum()
        total_sq += np.square(arr).sum()
        count += arr.size
    if count == 0:
        raise EmptyDatasetError("no readable images to compute statistics from")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = float(np.sqrt(var))
    if std < STD_FLOOR:
        warnings.warn(f"dataset std {std:g} is degenerate; clamped to {STD_FLOOR}")
        std = STD_FLOOR
    return NormalizationPolicy("dataset_stats", (float(mean),) * 3, (std,) * 3)


# -- batches -----------------------------------------------------------------------


@dataclass
class ImageDataset:
    """Decoded images plus resolved targets for one split.

    ``image_size`` has no default on purpose. Images are cached after the
    first decode; ``workers > 1`` decodes in threads without changing order.
    """

    records: list[StudyRecord]
    image_size: int
    normalization: NormalizationPolicy
    label_policy: str = "uncertain_as_negative"
    workers: int = 1
    _cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.targets, self.mask = resolve_labels(self.records, self.label_policy)
        self.truth = evaluation_truth(self.records, self.label_policy)

    def __len__(self) -> int:
        return len(self.records)

    def images(self) -> np.ndarray:
        if self._cache is None:
            paths = [r.image_path for r in self.records]
            load = lambda p: load_image(p, self.image_size)  # noqa: E731
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    arrays = list(pool.map(load, paths))
            else:
                arrays = [load(p) for p in paths]
            self._cache = (
                np.stack(arrays) if arrays else np.zeros((0, self.image_size, self.image_size), np.float32)
            )
        return self._cache

    def tensor(self, rows) -> torch.Tensor:
        x = torch.from_numpy(self.images()[np.asarray(rows)])
        x = x.unsqueeze(1).expand(-1, 3, -1, -1)
        return self.normalization.normalize(x)

    def order(self, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return numpy_rng(seed, f"data:epoch{epoch}").permutation(len(self))

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator[tuple]:
        """Yield ``(rows, images, targets, mask)`` in the seed-determined order."""
        order = self.order(seed, epoch, shuffle)
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            yield (
                rows,
                self.tensor(rows),
                torch.from_numpy(self.targets[rows]),
                torch.from_numpy(self.mask[rows]),
            )
