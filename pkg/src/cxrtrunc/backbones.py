"""Module builders: turn an :class:`ArchitectureSpec` into a :class:`UnitNet`.

Torchvision families are built with torchvision's constructors and then cut
into the units named by the spec. The unit modules are the same objects as
in the torchvision model, which is what lets :func:`torchvision_key_map`
translate torchvision checkpoints into unit-keyed weight maps.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable

import torch
from torch import nn
from torchvision import models as tvm

from .errors import NotFoundError, ShapeError, UnsupportedModelError
from .registry import ArchitectureSpec, parse_toy_variant


class ClassificationHead(nn.Module):
    """Global average pooling followed by one fully connected layer."""

    def __init__(self, in_channels: int, num_outputs: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_channels, num_outputs)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(x), 1))


class UnitNet(nn.Module):
    """A network stored as an ordered ``ModuleDict`` of units plus the head.

    ``forward`` returns logits. State-dict keys are ``units.<unit_id>.<path>``;
    :meth:`weight_map` drops the ``units.`` prefix.
    """

    def __init__(self, spec: ArchitectureSpec, body: "OrderedDict[str, nn.Module]", head: nn.Module):
        super().__init__()
        self.spec = spec
        self.units = nn.ModuleDict(body)
        self.units[spec.head.unit_id] = head
        self.body_ids = list(body)
        self.head_id = spec.head.unit_id

    @property
    def head(self) -> nn.Module:
        return self.units[self.head_id]

    @property
    def last_unit(self):
        return next(u for u in self.spec.units if u.unit_id == self.body_ids[-1])

    @property
    def num_outputs(self) -> int:
        return self.head.fc.out_features

    def min_input_size(self) -> int:
        return max(self.spec.min_input_size or 1, 2 ** self.last_unit.spatial_downsample)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise ShapeError(f"expected a (batch, channels, H, W) tensor, got shape {tuple(x.shape)}")
        need = self.min_input_size()
        if min(x.shape[-2:]) < need:
            raise ShapeError(
                f"{self.spec.name}: input {tuple(x.shape[-2:])} is smaller than the "
                f"minimum {need}x{need} allowed by its downsampling"
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        for uid in self.body_ids:
            x = self.units[uid](x)
        return x

    def activations(self, x: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        self.check_input(x)
        out = OrderedDict()
        for uid in self.body_ids:
            x = self.units[uid](x)
            out[uid] = x
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def weight_map(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (k[len("units."):], v) for k, v in self.state_dict().items()
        )


# -- per-family decompositions ------------------------------------------------
# Each returns (torchvision-or-native model, OrderedDict unit_id -> module).


def _densenet(spec):
    m = getattr(tvm, f"densenet{spec.variant}")(weights=None)
    f = m.features
    units = OrderedDict(
        stem=nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0),
        denseblock1=f.denseblock1,
        transition1=f.transition1,
        denseblock2=f.denseblock2,
        transition2=f.transition2,
        denseblock3=f.denseblock3,
        transition3=f.transition3,
        denseblock4=f.denseblock4,
        final_norm=nn.Sequential(f.norm5, nn.ReLU(inplace=False)),
    )
    return m, units


def _resnet(spec):
    m = getattr(tvm, f"resnet{spec.variant}")(weights=None)
    units = OrderedDict(
        stem=nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool),
        layer1=m.layer1,
        layer2=m.layer2,
        layer3=m.layer3,
        layer4=m.layer4,
    )
    return m, units


def _efficientnet(spec):
    m = getattr(tvm, f"efficientnet_{spec.variant.lower()}")(weights=None)
    f = m.features
    units = OrderedDict(stem=f[0])
    for i in range(1, 8):
        units[f"stage{i}"] = f[i]
    units["top"] = f[8]
    return m, units


def _mnasnet(spec):
    m = tvm.mnasnet1_0(weights=None)
    layers = m.layers
    units = OrderedDict(stem=nn.Sequential(*layers[:8]))
    for i in range(6):
        units[f"stack{i + 1}"] = layers[8 + i]
    units["top"] = nn.Sequential(*layers[14:17])
    return m, units


def _mobilenet(spec):
    if spec.variant == "V2":
        m = tvm.mobilenet_v2(weights=None)
    else:
        m = tvm.mobilenet_v3_large(weights=None)
    f = m.features
    units = OrderedDict(stem=f[0], body=nn.Sequential(*f[1:-1]), top=f[-1])
    return m, units


def _inception(spec):
    if spec.variant != "V3":
        raise UnsupportedModelError(
            f"{spec.name} has no local builder; supply it through a custom provider"
        )
    m = tvm.inception_v3(weights=None, aux_logits=False, init_weights=True)
    units = OrderedDict(
        stem=nn.Sequential(
            m.Conv2d_1a_3x3, m.Conv2d_2a_3x3, m.Conv2d_2b_3x3, m.maxpool1,
            m.Conv2d_3b_1x1, m.Conv2d_4a_3x3, m.maxpool2,
        ),
        body=nn.Sequential(
            m.Mixed_5b, m.Mixed_5c, m.Mixed_5d, m.Mixed_6a, m.Mixed_6b,
            m.Mixed_6c, m.Mixed_6d, m.Mixed_6e, m.Mixed_7a, m.Mixed_7b, m.Mixed_7c,
        ),
    )
    return m, units


def _toy_stage(c_in, c_out, downsample):
    layers = [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]
    if downsample:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _toy(spec):
    stages, channels = parse_toy_variant(spec.variant)
    units = OrderedDict(stem=_toy_stage(3, channels, False))
    for i in range(1, stages + 1):
        units[f"stage{i}"] = _toy_stage(channels, channels, True)
    return nn.Sequential(units), units


BUILDERS: dict[str, Callable] = {
    "DenseNet": _densenet,
    "ResNet": _resnet,
    "EfficientNet": _efficientnet,
    "MNASNet": _mnasnet,
    "MobileNet": _mobilenet,
    "Inception": _inception,
    "Toy": _toy,
}


def build_source(spec: ArchitectureSpec):
    """Build the full network for ``spec`` and its unit decomposition."""
    try:
        builder = BUILDERS[spec.family]
    except KeyError:
        raise NotFoundError(f"no builder for family {spec.family}") from None
    source, units = builder(spec)
    expected = [u.unit_id for u in spec.body]
    if list(units) != expected:
        raise RuntimeError(f"{spec.name}: builder produced units {list(units)}, spec lists {expected}")
    return source, units


def build_unitnet(
    spec: ArchitectureSpec,
    keep: int | None = None,
    num_outputs: int = 14,
    seed: int = 0,
) -> UnitNet:
    """Randomly initialised network keeping the first ``keep`` body units."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        _, units = build_source(spec)
        body_ids = list(units)[: keep if keep is not None else len(units)]
        body = OrderedDict((uid, units[uid]) for uid in body_ids)
        width = next(u.output_channels for u in spec.units if u.unit_id == body_ids[-1])
        head = ClassificationHead(width, num_outputs)
    return UnitNet(spec, body, head)


def init_head(model: UnitNet, seed: int) -> None:
    """Re-draw the head parameters (PyTorch's default fan-in uniform init)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.head.fc.reset_parameters()


def torchvision_key_map(spec: ArchitectureSpec) -> dict[str, str]:
    """Map torchvision state-dict keys to unit-keyed weight-map keys.

    Keys are matched through tensor identity, so the mapping follows the
    decomposition exactly. Entries of the original classifier are absent.
    """
    source, units = build_source(spec)
    ours = {}
    for uid, module in units.items():
        for name, t in module.state_dict(keep_vars=True).items():
            ours.setdefault(id(t), f"{uid}.{name}")
    mapping = {}
    for name, t in source.state_dict(keep_vars=True).items():
        if id(t) in ours:
            mapping[name] = ours[id(t)]
    return mapping
