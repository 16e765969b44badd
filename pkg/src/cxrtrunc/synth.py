"""Synthetic multilabel X-ray stand-in with planted, localised texture patches.

Each task owns a texture and a grid cell. A positive example gets the task's
texture painted into that cell; negatives leave the cell as background noise.
Textures differ per task, so a convolutional network with global pooling can
tell the tasks apart, and the location is fixed, so class activation maps
have a ground-truth box.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import EVAL_TASKS, OBSERVATIONS, Label, StudyRecord, write_manifest
from .seeding import numpy_rng

# evaluation tasks first so that --tasks 6 plants exactly the scored ones
TASK_ORDER = EVAL_TASKS + tuple(o for o in OBSERVATIONS if o not in EVAL_TASKS)

# 4x4 grid; first entries are spread out
CELL_ORDER = (
    (0, 0), (0, 2), (2, 0), (2, 2), (1, 3), (3, 1), (0, 1),
    (1, 0), (1, 2), (2, 1), (2, 3), (3, 0), (3, 2), (3, 3),
)

TEXTURES = (
    "hstripes4", "vstripes4", "diag6", "antidiag6", "checker8", "dots6", "hstripes8",
    "vstripes8", "diag10", "antidiag10", "checker4", "dots10", "ring", "cross",
)

BACKGROUND = 0.25
NOISE = 0.05
FOREGROUND = 0.9


def texture(name: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask for a named texture."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    masks = {
        "hstripes4": yy % 4 < 2,
        "vstripes4": xx % 4 < 2,
        "diag6": (yy + xx) % 6 < 3,
        "antidiag6": (yy - xx) % 6 < 3,
        "checker8": (yy // 4 + xx // 4) % 2 == 1,
        "dots6": (yy % 6 < 3) & (xx % 6 < 3),
        "hstripes8": yy % 8 < 4,
        "vstripes8": xx % 8 < 4,
        "diag10": (yy + xx) % 10 < 5,
        "antidiag10": (yy - xx) % 10 < 5,
        "checker4": (yy // 2 + xx // 2) % 2 == 1,
        "dots10": (yy % 10 < 4) & (xx % 10 < 4),
        "ring": (r2 <= (size / 2) ** 2) & (r2 >= (size / 3) ** 2),
        "cross": (np.abs(yy - c) < size / 8) | (np.abs(xx - c) < size / 8),
    }
    return masks[name]


@dataclass(frozen=True)
class PlantRule:
    task: str
    texture: str
    top: int
    left: int
    size: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), bottom/right exclusive."""
        return (self.top, self.left, self.top + self.size, self.left + self.size)


@dataclass
class SynthConfig:
    count: int
    image_size: int = 64
    tasks: int = 6
    seed: int = 0
    positive_rate: float = 0.5
    uncertain_rate: float = 0.0
    splits: dict = field(default_factory=lambda: {"train": 0.6, "valid": 0.2, "test": 0.2})

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not 1 <= self.tasks <= len(TASK_ORDER):
            raise ValueError(f"tasks must be between 1 and {len(TASK_ORDER)}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    def rules(self) -> list[PlantRule]:
        cell = self.image_size // 4
        return [
            PlantRule(TASK_ORDER[t], TEXTURES[t], CELL_ORDER[t][0] * cell, CELL_ORDER[t][1] * cell, cell)
            for t in range(self.tasks)
        ]


def render(labels: dict[str, bool], rules: list[PlantRule], size: int, rng: np.random.Generator) -> np.ndarray:
    img = BACKGROUND + NOISE * rng.standard_normal((size, size))
    for rule in rules:
        if labels.get(rule.task):
            t, l, b, r = rule.box
            patch = texture(rule.texture, rule.size)
            img[t:b, l:r] = np.where(patch, FOREGROUND, img[t:b, l:r])
    return np.clip(img, 0.0, 1.0)


def _split_sizes(count: int, splits: dict) -> dict:
    names = list(splits)
    sizes = {n: int(np.floor(count * splits[n])) for n in names}
    sizes[names[0]] += count - sum(sizes.values())
    return sizes


def make_synthetic_dataset(config: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write PNG images and one manifest per split; returns ``{split: manifest}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rules = config.rules()
    rng = numpy_rng(config.seed, "synth")
    manifests = {}
    index = 0
    for split, n in _split_sizes(config.count, config.splits).items():
        img_dir = out_dir / "images" / split
        if n:
            img_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for _ in range(n):
            present = {r.task: bool(rng.random() < config.positive_rate) for r in rules}
            labels = []
            for obs in OBSERVATIONS:
                if obs not in present:
                    labels.append(Label.MISSING)
                elif config.uncertain_rate and rng.random() < config.uncertain_rate:
                    labels.append(Label.UNCERTAIN)
                else:
                    labels.append(Label.POSITIVE if present[obs] else Label.NEGATIVE)
            img = render(present, rules, config.image_size, rng)
            path = img_dir / f"{index:05d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)
            records.append(StudyRecord(str(path), "frontal", tuple(labels)))
            index += 1
        manifests[split] = write_manifest(records, out_dir / f"{split}.csv", root=out_dir)
    meta = {"config": asdict(config), "rules": [asdict(r) for r in rules]}
    (out_dir / "synth.json").write_text(json.dumps(meta, indent=2) + "\n")
    return manifests


def load_rules(out_dir: str | Path) -> list[PlantRule]:
    meta = json.loads((Path(out_dir) / "synth.json").read_text())
    return [PlantRule(**r) for r in meta["rules"]]
