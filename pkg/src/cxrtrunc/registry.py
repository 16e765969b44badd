"""Backbone families described as ordered block units with trailing truncation groups.

Each :class:`ArchitectureSpec` lists the units of a network in forward order.
Units that may be pruned carry a ``removable_group`` index; group 1 is the
last one removed first. The specs are pure data, building actual modules is
the job of :mod:`cxrtrunc.backbones`.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .errors import NotFoundError, RegistryConflictError

UNIT_KINDS = (
    "stem",
    "dense_block",
    "transition",
    "residual_stage",
    "mbconv_group",
    "inception_group",
    "conv_stage",
    "norm",
    "head",
)
FAMILIES = ("DenseNet", "ResNet", "EfficientNet", "MobileNet", "MNASNet", "Inception", "Toy")
NUM_OUTPUTS = 14


@dataclass(frozen=True)
class BlockUnit:
    unit_id: str
    kind: str
    output_channels: int
    spatial_downsample: int
    removable_group: int | None = None

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.output_channels <= 0:
            raise ValueError(f"unit {self.unit_id}: output_channels must be positive")
        if self.spatial_downsample < 0:
            raise ValueError(f"unit {self.unit_id}: spatial_downsample must be >= 0")


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    variant: str
    units: tuple[BlockUnit, ...]
    pretrained_source: str | None = None
    published_param_count: float | None = None  # millions, reference only
    published_imagenet_top1: float | None = None
    min_input_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.units:
            raise ValueError("units list is empty")
        ids = [u.unit_id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate unit ids")
        heads = [u for u in self.units if u.kind == "head"]
        if len(heads) != 1 or self.units[-1].kind != "head":
            raise ValueError(f"{self.name}: exactly one head unit, in last position, is required")
        if heads[0].removable_group is not None:
            raise ValueError(f"{self.name}: the head cannot be removable")
        if len(self.units) < 2:
            raise ValueError(f"{self.name}: at least one unit must precede the head")

        # groups must be contiguous 1..G over trailing units, numbered from the end
        body = self.units[:-1]
        groups = [u.removable_group for u in body]
        seen_fixed = False
        expected = []
        for g in reversed(groups):
            if g is None:
                seen_fixed = True
                continue
            if seen_fixed:
                raise ValueError(f"{self.name}: removable units must all be trailing")
            expected.append(g)
        # reversed walk sees non-increasing group indices; group labels start at 1
        distinct = []
        for g in expected:
            if not distinct or distinct[-1] != g:
                distinct.append(g)
        if distinct != list(range(1, len(distinct) + 1)):
            raise ValueError(f"{self.name}: removable groups must form 1..G from the end")
        if groups and groups[0] is not None:
            raise ValueError(f"{self.name}: removing every group would leave no features")

    @property
    def name(self) -> str:
        if self.family == "MNASNet" and self.variant == "1.0":
            return "MNASNet"
        return f"{self.family}{self.variant}"

    @property
    def key(self) -> tuple[str, str]:
        return (self.family, self.variant)

    @property
    def max_depth(self) -> int:
        return max((u.removable_group or 0 for u in self.units), default=0)

    @property
    def head(self) -> BlockUnit:
        return self.units[-1]

    @property
    def body(self) -> tuple[BlockUnit, ...]:
        return self.units[:-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units"] = [asdict(u) for u in self.units]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["units"] = tuple(BlockUnit(**u) for u in d["units"])
        return cls(**d)


class SpecHandle(NamedTuple):
    family: str
    variant: str


class Registry:
    """Thread-safe mapping of ``(family, variant)`` to :class:`ArchitectureSpec`.

    Lookups are case-insensitive on the family name.
    """

    def __init__(self, specs: Iterable[ArchitectureSpec] = ()):
        self._specs: dict[tuple[str, str], ArchitectureSpec] = {}
        self._lock = threading.Lock()
        for spec in specs:
            self.register(spec)

    def register(self, spec: ArchitectureSpec) -> SpecHandle:
        spec.validate()
        with self._lock:
            current = self._specs.get(spec.key)
            if current is not None and current != spec:
                raise RegistryConflictError(
                    f"{spec.name} is already registered with different content"
                )
            self._specs[spec.key] = spec
        return SpecHandle(*spec.key)

    def _resolve_family(self, family: str) -> str:
        for f in FAMILIES:
            if f.lower() == family.lower():
                return f
        raise NotFoundError(f"unknown family {family!r}; known: {', '.join(FAMILIES)}")

    def get(self, family: str, variant: str | None = None) -> ArchitectureSpec:
        fam = self._resolve_family(family)
        if variant is None:
            candidates = [s for (f, _), s in self._specs.items() if f == fam]
            if len(candidates) == 1:
                return candidates[0]
            raise NotFoundError(
                f"family {fam} has {len(candidates)} variants; pass one of "
                f"{sorted(s.variant for s in candidates)}"
            )
        for (f, v), spec in self._specs.items():
            if f == fam and v.lower() == str(variant).lower():
                return spec
        raise NotFoundError(f"no variant {variant!r} registered for {fam}")

    def by_name(self, name: str) -> ArchitectureSpec:
        for spec in self._specs.values():
            if spec.name.lower() == name.lower():
                return spec
        raise NotFoundError(f"no architecture named {name!r}")

    def segment_units(self, family: str, variant: str | None = None) -> list[BlockUnit]:
        return list(self.get(family, variant).units)

    def families(self) -> list[str]:
        return sorted({f for f, _ in self._specs})

    def __iter__(self) -> Iterator[ArchitectureSpec]:
        return iter(list(self._specs.values()))

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._specs


# -- serialization ----------------------------------------------------------


def save_family(specs: Iterable[ArchitectureSpec], path: str | Path) -> Path:
    specs = list(specs)
    families = {s.family for s in specs}
    if len(families) != 1:
        raise ValueError(f"one family per file, got {sorted(families)}")
    path = Path(path)
    payload = {"family": families.pop(), "variants": [s.to_dict() for s in specs]}
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_family(path: str | Path) -> list[ArchitectureSpec]:
    payload = json.loads(Path(path).read_text())
    return [ArchitectureSpec.from_dict(d) for d in payload["variants"]]


# -- built-in families --------------------------------------------------------


def _head(channels_in_ds: int) -> BlockUnit:
    return BlockUnit("head", "head", NUM_OUTPUTS, channels_in_ds)


def densenet_spec(variant: str) -> ArchitectureSpec:
    blocks, transitions = {
        "121": ((256, 512, 1024, 1024), (128, 256, 512)),
        "169": ((256, 512, 1280, 1664), (128, 256, 640)),
        "201": ((256, 512, 1792, 1920), (128, 256, 896)),
    }[variant]
    # group g bundles dense block 5-g with the transition in front of it
    units = [
        BlockUnit("stem", "stem", 64, 2),
        BlockUnit("denseblock1", "dense_block", blocks[0], 2),
        BlockUnit("transition1", "transition", transitions[0], 3, 3),
        BlockUnit("denseblock2", "dense_block", blocks[1], 3, 3),
        BlockUnit("transition2", "transition", transitions[1], 4, 2),
        BlockUnit("denseblock3", "dense_block", blocks[2], 4, 2),
        BlockUnit("transition3", "transition", transitions[2], 5, 1),
        BlockUnit("denseblock4", "dense_block", blocks[3], 5, 1),
        BlockUnit("final_norm", "norm", blocks[3], 5, 1),
        _head(5),
    ]
    return ArchitectureSpec("DenseNet", variant, units, pretrained_source=f"torchvision:densenet{variant}")


def resnet_spec(variant: str) -> ArchitectureSpec:
    widths = (64, 128, 256, 512) if variant in ("18", "34") else (256, 512, 1024, 2048)
    units = [
        BlockUnit("stem", "stem", 64, 2),
        BlockUnit("layer1", "residual_stage", widths[0], 2),
        BlockUnit("layer2", "residual_stage", widths[1], 3, 3),
        BlockUnit("layer3", "residual_stage", widths[2], 4, 2),
        BlockUnit("layer4", "residual_stage", widths[3], 5, 1),
        _head(5),
    ]
    return ArchitectureSpec("ResNet", variant, units, pretrained_source=f"torchvision:resnet{variant}")


_EFFICIENTNET_CHANNELS = {
    "B0": (32, 16, 24, 40, 80, 112, 192, 320, 1280),
    "B1": (32, 16, 24, 40, 80, 112, 192, 320, 1280),
    "B2": (32, 16, 24, 48, 88, 120, 208, 352, 1408),
    "B3": (40, 24, 32, 48, 96, 136, 232, 384, 1536),
}


def efficientnet_spec(variant: str) -> ArchitectureSpec:
    ch = _EFFICIENTNET_CHANNELS[variant]
    ds = (1, 1, 2, 3, 4, 4, 5, 5, 5)
    units = [BlockUnit("stem", "stem", ch[0], ds[0])]
    for i in range(1, 8):
        group = {7: 1, 6: 2}.get(i)
        units.append(BlockUnit(f"stage{i}", "mbconv_group", ch[i], ds[i], group))
    units.append(BlockUnit("top", "mbconv_group", ch[8], ds[8], 1))
    units.append(_head(5))
    return ArchitectureSpec(
        "EfficientNet", variant, units, pretrained_source=f"torchvision:efficientnet_{variant.lower()}"
    )


def mnasnet_spec(variant: str = "1.0") -> ArchitectureSpec:
    if variant != "1.0":
        raise NotFoundError(f"MNASNet variant {variant!r} is not defined")
    # stage-level groups: stack6 + top conv is removed first, stack3 last
    units = [
        BlockUnit("stem", "stem", 16, 1),
        BlockUnit("stack1", "mbconv_group", 24, 2),
        BlockUnit("stack2", "mbconv_group", 40, 3),
        BlockUnit("stack3", "mbconv_group", 80, 4, 4),
        BlockUnit("stack4", "mbconv_group", 96, 4, 3),
        BlockUnit("stack5", "mbconv_group", 192, 5, 2),
        BlockUnit("stack6", "mbconv_group", 320, 5, 1),
        BlockUnit("top", "mbconv_group", 1280, 5, 1),
        _head(5),
    ]
    return ArchitectureSpec("MNASNet", variant, units, pretrained_source="torchvision:mnasnet1_0")


def mobilenet_spec(variant: str) -> ArchitectureSpec:
    stem, body, top = {"V2": (32, 320, 1280), "V3": (16, 160, 960)}[variant]
    units = [
        BlockUnit("stem", "stem", stem, 1),
        BlockUnit("body", "mbconv_group", body, 5),
        BlockUnit("top", "mbconv_group", top, 5),
        _head(5),
    ]
    source = "torchvision:mobilenet_v2" if variant == "V2" else "torchvision:mobilenet_v3_large"
    return ArchitectureSpec("MobileNet", variant, units, pretrained_source=source)


def inception_spec(variant: str) -> ArchitectureSpec:
    stem, body, source = {
        "V3": (192, 2048, "torchvision:inception_v3"),
        "V4": (384, 1536, None),
    }[variant]
    units = [
        BlockUnit("stem", "stem", stem, 3),
        BlockUnit("body", "inception_group", body, 5),
        _head(5),
    ]
    return ArchitectureSpec("Inception", variant, units, pretrained_source=source, min_input_size=75)


def toy_spec(stages: int = 3, channels: int = 32) -> ArchitectureSpec:
    """Stem plus ``stages`` identical conv stages, each halving resolution.

    Every stage is removable, so ``max_depth == stages``.
    """
    if stages < 1 or channels < 1:
        raise ValueError("toy spec needs at least one stage and one channel")
    units = [BlockUnit("stem", "stem", channels, 0)]
    for i in range(1, stages + 1):
        units.append(BlockUnit(f"stage{i}", "conv_stage", channels, i, stages - i + 1))
    units.append(_head(stages))
    return ArchitectureSpec("Toy", f"{stages}x{channels}", units)


def parse_toy_variant(variant: str) -> tuple[int, int]:
    try:
        stages, channels = (int(p) for p in variant.lower().split("x"))
    except ValueError:
        raise NotFoundError(f"toy variant must look like '<stages>x<channels>', got {variant!r}") from None
    return stages, channels


# Table 1 parameter counts (millions); kept as reference metadata only.
PUBLISHED_PARAMS = {
    "DenseNet121": 6.968,
    "DenseNet169": 12.508,
    "DenseNet201": 18.120,
    "EfficientNetB0": 4.025,
    "EfficientNetB1": 6.531,
    "EfficientNetB2": 7.721,
    "EfficientNetB3": 10.718,
    "InceptionV3": 27.161,
    "InceptionV4": 42.680,
    "MNASNet": 5.290,
    "MobileNetV2": 2.242,
    "MobileNetV3": 4.220,
    "ResNet101": 44.549,
    "ResNet18": 11.690,
    "ResNet34": 21.798,
    "ResNet50": 25.557,
}


def _with_reference(spec: ArchitectureSpec) -> ArchitectureSpec:
    d = spec.to_dict()
    d["published_param_count"] = PUBLISHED_PARAMS.get(spec.name)
    return ArchitectureSpec.from_dict(d)


def builtin_specs() -> list[ArchitectureSpec]:
    specs = []
    specs += [densenet_spec(v) for v in ("121", "169", "201")]
    specs += [resnet_spec(v) for v in ("18", "34", "50", "101")]
    specs += [efficientnet_spec(v) for v in ("B0", "B1", "B2", "B3")]
    specs += [mobilenet_spec(v) for v in ("V2", "V3")]
    specs += [inception_spec(v) for v in ("V3", "V4")]
    specs.append(mnasnet_spec())
    specs = [_with_reference(s) for s in specs]
    specs += [toy_spec(3, 32), toy_spec(2, 8)]
    return specs


REGISTRY = Registry(builtin_specs())


def get_spec(family: str, variant: str | None = None, registry: Registry | None = None) -> ArchitectureSpec:
    """Look up a spec; unknown Toy variants of the form ``NxC`` are created on demand."""
    reg = registry or REGISTRY
    try:
        return reg.get(family, variant)
    except NotFoundError:
        if family.lower() == "toy" and variant is not None:
            spec = toy_spec(*parse_toy_variant(variant))
            reg.register(spec)
            return spec
        raise


def segment_units(family: str, variant: str | None = None, registry: Registry | None = None) -> list[BlockUnit]:
    return list(get_spec(family, variant, registry).units)


def count_params(model) -> int:
    """Exact number of trainable parameters of a torch module."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
