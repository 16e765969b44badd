"""Trailing-block truncation of backbones and pretrained weight remapping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbones import UnitNet, init_head
from .errors import InvalidDepthError, ShapeError
from .providers import BackboneProvider, load_retained
from .registry import NUM_OUTPUTS, ArchitectureSpec, BlockUnit, count_params


@dataclass(frozen=True)
class TruncationPlan:
    base: ArchitectureSpec
    k: int
    num_outputs: int = NUM_OUTPUTS

    def __post_init__(self):
        if not 0 <= self.k <= self.base.max_depth:
            raise InvalidDepthError(self.base.name, self.k, self.base.max_depth)

    @property
    def name(self) -> str:
        return f"{self.base.name}Minus{self.k}" if self.k else self.base.name

    @property
    def retained_units(self) -> tuple[BlockUnit, ...]:
        return tuple(
            u for u in self.base.body if u.removable_group is None or u.removable_group > self.k
        )

    @property
    def last_unit(self) -> BlockUnit:
        return self.retained_units[-1]

    @property
    def head_in_channels(self) -> int:
        return self.last_unit.output_channels

    @property
    def head(self) -> dict:
        return {"pool": "global_average", "fc_in": self.head_in_channels, "fc_out": self.num_outputs}

    def to_dict(self) -> dict:
        return {"name": self.name, "k": self.k, "num_outputs": self.num_outputs, "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TruncationPlan":
        return cls(ArchitectureSpec.from_dict(d["base"]), int(d["k"]), int(d.get("num_outputs", NUM_OUTPUTS)))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TruncationPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def truncate(base: ArchitectureSpec, k: int, num_outputs: int = NUM_OUTPUTS) -> TruncationPlan:
    """Plan that drops removable groups ``1..k`` and re-attaches a fresh head."""
    return TruncationPlan(base, int(k), num_outputs)


def instantiate(
    plan: TruncationPlan,
    pretrained: bool = False,
    provider: BackboneProvider | None = None,
    seed: int = 0,
    weights: dict | None = None,
) -> UnitNet:
    """Build the network for ``plan``.

    With ``pretrained`` the retained units receive the provider's weights
    (buffers included) and only the head is drawn from ``seed``. Without it
    every parameter is random. ``weights`` bypasses the provider lookup.
    """
    provider = provider or BackboneProvider()
    model = provider.build(plan.base, keep=len(plan.retained_units), num_outputs=plan.num_outputs, seed=seed)
    if pretrained:
        if weights is None:
            weights = provider.weight_map(plan.base)
        load_retained(model, weights)
        init_head(model, seed)
    return model


def predict_proba(model: UnitNet, batch: torch.Tensor) -> torch.Tensor:
    """Per-task probabilities ``(batch, num_outputs)`` via elementwise sigmoid."""
    if batch.dim() == 3:
        raise ShapeError("expected a batch dimension; got a single (C, H, W) image")
    return torch.sigmoid(model(batch))


def times_smaller_for(plan: TruncationPlan, provider: BackboneProvider | None = None) -> float:
    provider = provider or BackboneProvider()
    base = count_params(instantiate(truncate(plan.base, 0, plan.num_outputs), provider=provider))
    cut = count_params(instantiate(plan, provider=provider))
    return base / cut


__all__ = [
    "TruncationPlan",
    "truncate",
    "instantiate",
    "predict_proba",
    "times_smaller_for",
]
