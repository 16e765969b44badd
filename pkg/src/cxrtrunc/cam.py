"""Gradient-weighted class activation maps and overlays.

Channel weights are the spatial mean of the *positive part* of the task
logit's gradient with respect to the last retained feature map. The map is
normalised by its maximum and then scaled by the task probability, so more
confident predictions render brighter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbones import UnitNet
from .data import OBSERVATIONS
from .errors import InputError, UnsupportedModelError

OVERLAY_ALPHA = 0.5
COLORMAP = "jet"


@dataclass
class CAMResult:
    heatmap: np.ndarray
    upsampled: np.ndarray
    task: str
    probability: float
    overlay_path: str | None = None

    @property
    def peak(self) -> tuple[int, int]:
        """(row, col) of the upsampled map's maximum."""
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.upsampled), self.upsampled.shape))


def task_index(task: str | int, task_names: Sequence[str] = OBSERVATIONS) -> tuple[int, str]:
    if isinstance(task, (int, np.integer)):
        if not 0 <= task < len(task_names):
            raise InputError(f"task index {task} out of range 0..{len(task_names) - 1}")
        return int(task), task_names[task]
    if task not in task_names:
        raise InputError(f"unknown task {task!r}; valid names: {', '.join(task_names)}")
    return task_names.index(task), task


def gradcam(model: UnitNet, image: torch.Tensor, task: str | int,
            task_names: Sequence[str] = OBSERVATIONS) -> CAMResult:
    """Class activation map for one (already normalised) image.

    ``image`` is ``(C, H, W)`` or ``(1, C, H, W)``. Gradients are taken with
    ``torch.autograd.grad`` so the model carries no hook state.
    """
    if model.last_unit.kind == "stem":
        raise UnsupportedModelError(
            f"{model.spec.name}: only the stem is retained, so there is no block feature map to explain"
        )
    j, name = task_index(task, task_names[: model.num_outputs])
    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.dim() != 4 or x.shape[0] != 1:
        raise InputError(f"expected one image, got shape {tuple(image.shape)}")
    model.eval()
    with torch.enable_grad():
        x = x.detach().to(next(model.parameters()).dtype)
        feats = model.features(x)
        logit = model.head(feats)[0, j]
        (grad,) = torch.autograd.grad(logit, feats)
    feats = feats.detach()[0]
    weights = grad[0].clamp(min=0).mean(dim=(1, 2))
    cam = torch.relu(torch.einsum("c,chw->hw", weights, feats))
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    prob = float(torch.sigmoid(logit.detach()))
    cam = cam * prob
    up = F.interpolate(cam[None, None], size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    up = up.clamp(0.0, prob)
    return CAMResult(cam.numpy().astype(np.float64), up.numpy().astype(np.float64), name, prob)


def _colormap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[COLORMAP](values)[..., :3]


def overlay_array(result: CAMResult, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """RGB uint8 overlay; each pixel mixes in the colour map in proportion to the map value."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=0) if gray.shape[0] in (1, 3) else gray.mean(axis=-1)
    if gray.shape != result.upsampled.shape:
        raise InputError(f"heatmap {result.upsampled.shape} does not match image {gray.shape}")
    gray = np.clip(gray, 0.0, 1.0)
    m = result.upsampled[..., None]
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    blended = rgb * (1.0 - alpha * m) + alpha * m * _colormap(result.upsampled)
    return np.round(np.clip(blended, 0.0, 1.0) * 255).astype(np.uint8)


def render_overlay(result: CAMResult, image: np.ndarray, path: str | Path, alpha: float = OVERLAY_ALPHA) -> Path:
    """Write the overlay as PNG. ``image`` is grayscale in [0, 1] at input resolution."""
    path = Path(path)
    Image.fromarray(overlay_array(result, image, alpha), mode="RGB").save(path, format="PNG")
    result.overlay_path = str(path)
    return path


def render_grid(results: Sequence[CAMResult], image: np.ndarray, path: str | Path,
                alpha: float = OVERLAY_ALPHA, gap: int = 4) -> Path:
    """Overlays side by side, left to right in the given order."""
    if not results:
        raise InputError("nothing to render")
    tiles = [overlay_array(r, image, alpha) for r in results]
    h, w, _ = tiles[0].shape
    canvas = np.full((h, len(tiles) * w + (len(tiles) - 1) * gap, 3), 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        canvas[:, i * (w + gap): i * (w + gap) + w] = tile
    path = Path(path)
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")
    return path


def save_heatmap(grid: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(grid):
            w.writerow([repr(float(v)) for v in row])
    return path


def load_heatmap(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float64)
