"""Sources of pretrained weight maps.

A provider builds randomly initialised :class:`UnitNet` instances and, for
pretrained requests, returns a weight map keyed ``<unit_id>.<layer path>``
covering every parameter and buffer of the non-head units.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import OrderedDict
from pathlib import Path

import torch
from torch import nn

from .backbones import UnitNet, build_unitnet, torchvision_key_map
from .errors import NotFoundError, RemapError
from .registry import ArchitectureSpec, get_spec
from .seeding import derive_seed

log = logging.getLogger(__name__)

CACHE_ENV = "CXRTRUNC_CACHE"

# legacy densenet checkpoints spell "norm.1" instead of "norm1"
_DENSENET_LEGACY = re.compile(
    r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var|num_batches_tracked))$"
)


class BackboneProvider:
    """Base provider: random builds only, no pretrained weights."""

    def build(self, spec: ArchitectureSpec, keep: int | None = None, num_outputs: int = 14, seed: int = 0) -> UnitNet:
        return build_unitnet(spec, keep=keep, num_outputs=num_outputs, seed=seed)

    def weight_map(self, spec: ArchitectureSpec) -> "OrderedDict[str, torch.Tensor]":
        raise NotFoundError(f"{type(self).__name__} has no pretrained weights for {spec.name}")

    def provide(self, family: str, variant: str | None, pretrained: bool, *, num_outputs: int = 14, seed: int = 0):
        spec = get_spec(family, variant)
        model = self.build(spec, num_outputs=num_outputs, seed=seed)
        return model, (self.weight_map(spec) if pretrained else None)


def _strip_classifier(state: dict, spec: ArchitectureSpec) -> dict:
    body = {u.unit_id for u in spec.body}
    return OrderedDict((k, v) for k, v in state.items() if k.split(".", 1)[0] in body)


def convert_state_dict(state: dict, spec: ArchitectureSpec) -> "OrderedDict[str, torch.Tensor]":
    """Normalise a checkpoint state dict into a unit-keyed weight map.

    Accepts unit-keyed maps (optionally prefixed ``units.``), full training
    checkpoints with a ``model_state`` entry, and torchvision state dicts.
    """
    if "model_state" in state:
        state = state["model_state"]
    body_ids = {u.unit_id for u in spec.body}
    keys = list(state)
    if keys and all(k.startswith("units.") for k in keys):
        return _strip_classifier(OrderedDict((k[6:], v) for k, v in state.items()), spec)
    if keys and any(k.split(".", 1)[0] in body_ids for k in keys) and not any(
        k.startswith(("features.", "layers.", "conv1.", "fc.", "classifier.")) for k in keys
    ):
        return _strip_classifier(OrderedDict(state), spec)

    mapping = torchvision_key_map(spec)
    out = OrderedDict()
    for k, v in state.items():
        k = _DENSENET_LEGACY.sub(lambda m: m.group(1) + m.group(2), k)
        if k in mapping:
            out[mapping[k]] = v
    return out


class CheckpointProvider(BackboneProvider):
    """Weight maps from local files or URLs.

    ``sources`` maps provider keys (``spec.pretrained_source``, e.g.
    ``"torchvision:densenet121"``) or architecture names to a path or URL.
    Keys of the form ``torchvision:<name>`` without an explicit entry fall back
    to the torchvision weight registry (requires network or a warm cache).
    ``override`` forces one path for every spec, which is how a prior run's
    checkpoint is used as the pretrained source.
    """

    def __init__(self, sources: dict[str, str] | None = None, override: str | os.PathLike | None = None,
                 cache_dir: str | os.PathLike | None = None):
        self.sources = dict(sources or {})
        self.override = override
        self.cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        self._cache: dict[tuple, OrderedDict] = {}

    @classmethod
    def from_config(cls, path: str | os.PathLike, **kwargs) -> "CheckpointProvider":
        payload = json.loads(Path(path).read_text())
        return cls(sources=payload.get("sources", payload), **kwargs)

    def resolve(self, spec: ArchitectureSpec) -> str:
        if self.override is not None:
            return str(self.override)
        for key in (spec.pretrained_source, spec.name):
            if key and key in self.sources:
                return self.sources[key]
        if spec.pretrained_source and spec.pretrained_source.startswith("torchvision:"):
            return spec.pretrained_source
        raise NotFoundError(f"no pretrained source configured for {spec.name}")

    def _load(self, location: str, spec: ArchitectureSpec) -> dict:
        if location.startswith("torchvision:"):
            return self._load_torchvision(location.split(":", 1)[1])
        if location.startswith(("http://", "https://")):
            hub_dir = Path(self.cache_dir, "checkpoints") if self.cache_dir else None
            return torch.hub.load_state_dict_from_url(
                location, model_dir=str(hub_dir) if hub_dir else None, map_location="cpu", progress=False
            )
        path = Path(location)
        if not path.exists():
            raise NotFoundError(f"checkpoint {path} does not exist")
        return torch.load(path, map_location="cpu", weights_only=True)

    def _load_torchvision(self, name: str) -> dict:
        from torchvision import models as tvm

        if self.cache_dir:
            torch.hub.set_dir(str(self.cache_dir))
        weights = tvm.get_model_weights(name).DEFAULT
        log.info("fetching %s weights from %s", name, weights.url)
        kwargs = {"aux_logits": True} if name == "inception_v3" else {}
        model = getattr(tvm, name)(weights=weights, **kwargs)
        return model.state_dict()

    def weight_map(self, spec: ArchitectureSpec) -> "OrderedDict[str, torch.Tensor]":
        location = self.resolve(spec)
        key = (spec.key, location)
        if key not in self._cache:
            self._cache[key] = convert_state_dict(self._load(location, spec), spec)
        return OrderedDict((k, v.clone()) for k, v in self._cache[key].items())


class SyntheticPretrainedProvider(BackboneProvider):
    """Offline stand-in for a checkpoint hub.

    The "pretrained" weights are a seeded random initialisation of the full
    base network with non-trivial batch-norm statistics. Useful wherever the
    numerical content of the weights does not matter, only that they are
    transferred faithfully.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def weight_map(self, spec: ArchitectureSpec) -> "OrderedDict[str, torch.Tensor]":
        seed = derive_seed(self.seed, f"pretrained:{spec.name}")
        model = build_unitnet(spec, seed=seed)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in model.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.running_mean.normal_(0.0, 0.1, generator=g)
                    m.running_var.uniform_(0.5, 1.5, generator=g)
        return _strip_classifier(model.weight_map(), spec)


def required_keys(model: UnitNet) -> list[str]:
    """Weight-map keys the retained (non-head) units of ``model`` need."""
    return [k for k in model.weight_map() if k.split(".", 1)[0] != model.head_id]


def load_retained(model: UnitNet, weights: dict) -> None:
    """Copy ``weights`` into every non-head unit of ``model``."""
    need = required_keys(model)
    missing = [k for k in need if k not in weights]
    if missing:
        raise RemapError(missing)
    subset = {f"units.{k}": weights[k] for k in need}
    result = model.load_state_dict(subset, strict=False)
    leftover = [k for k in result.missing_keys if not k.startswith(f"units.{model.head_id}.")]
    if leftover:
        raise RemapError([k[len("units."):] for k in leftover])
