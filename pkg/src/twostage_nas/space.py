"""Search-space types for detection pipelines.

Two spaces live here:

* the structural space: which backbone, neck, RPN, head and input resolution
  are combined into a detector;
* the modular space: the block layout of a custom backbone, written as an
  encoding string such as ``basicblock_64_1-21-21-12``.
"""

from __future__ import annotations

import itertools
import re
from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

BLOCK_TYPES = ("basicblock", "bottleneck", "xbottleneck", "mbblock")
# Alternate spellings accepted by the parser; the spelling is kept for formatting.
_BLOCK_ALIASES = {"Xbottleneck": "xbottleneck"}

NAMED_BACKBONES = (
    "resnet18",
    "resnet34",
    "resnet50",
    "resnet101",
    "resnext50",
    "resnext101",
    "mobilenetv2",
)

NUM_STAGES = 4
MAX_LEVEL = 6
NATIVE_LEVELS = 4
DEFAULT_MAX_DEPTH = 40
DEFAULT_MAX_DOUBLINGS = 4
MBBLOCK_EXPANSION = 6


class NeckKind(str, Enum):
    NONE = "none"
    FPN = "fpn"


class RpnKind(str, Enum):
    NONE = "none"
    RPN = "rpn"
    GA_RPN = "ga_rpn"


class HeadKind(str, Enum):
    FC2 = "fc2"
    RETINA = "retina"
    CASCADE = "cascade"


# --------------------------------------------------------------------------
# Encoding grammar errors


class EncodingError(ValueError):
    """Base class for backbone-encoding parse and validation errors."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class MalformedEncodingError(EncodingError):
    pass


class UnknownBlockError(EncodingError):
    pass


class NonPositiveBaseError(EncodingError):
    pass


class EmptyStageError(EncodingError):
    pass


class StageCountError(EncodingError):
    pass


class EncodingBoundsError(EncodingError):
    """Depth or doubling count beyond the encoding caps."""


# --------------------------------------------------------------------------
# Backbone encoding


@dataclass(frozen=True)
class BackboneEncoding:
    """Genome of a custom backbone.

    ``stages`` holds the block codes of the four searchable stages (strides
    4, 8, 16 and 32). Code 1 keeps the running width, code 2 doubles it.
    """

    block: str
    base: int
    stages: tuple[tuple[int, ...], ...]
    spelling: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        stages = tuple(tuple(int(c) for c in s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.block not in BLOCK_TYPES:
            raise UnknownBlockError(f"unknown block type {self.block!r}")
        if not isinstance(self.base, int) or self.base <= 0:
            raise NonPositiveBaseError(f"base width must be positive, got {self.base!r}")
        if len(stages) != NUM_STAGES:
            raise StageCountError(f"expected {NUM_STAGES} stage groups, found {len(stages)}")
        for i, stage in enumerate(stages):
            if not stage:
                raise EmptyStageError(f"stage {i + 2} is empty")
            if any(c not in (1, 2) for c in stage):
                raise MalformedEncodingError(f"stage {i + 2} has codes outside {{1, 2}}")
        if self.depth > DEFAULT_MAX_DEPTH:
            raise EncodingBoundsError(f"depth {self.depth} exceeds cap {DEFAULT_MAX_DEPTH}")
        if self.doublings > DEFAULT_MAX_DOUBLINGS:
            raise EncodingBoundsError(
                f"{self.doublings} doublings exceed cap {DEFAULT_MAX_DOUBLINGS}"
            )

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(itertools.chain.from_iterable(self.stages))

    @property
    def depth(self) -> int:
        return sum(len(s) for s in self.stages)

    @property
    def doublings(self) -> int:
        return sum(s.count(2) for s in self.stages)

    def block_widths(self) -> list[int]:
        """Running width after each block, in block order."""
        widths = []
        width = self.base
        for code in self.codes:
            if code == 2:
                width *= 2
            widths.append(width)
        return widths

    def with_stages(self, stages) -> BackboneEncoding:
        return BackboneEncoding(self.block, self.base, tuple(tuple(s) for s in stages))

    def with_base(self, base: int) -> BackboneEncoding:
        return BackboneEncoding(self.block, base, self.stages)

    def __str__(self) -> str:
        return format_backbone_encoding(self)


_BASE_RE = re.compile(r"[1-9][0-9]*\Z")


def parse_backbone_encoding(text: str) -> BackboneEncoding:
    """Parse ``<block>_<base>_<s2>-<s3>-<s4>-<s5>``.

    Raises a subclass of :class:`EncodingError` carrying the character
    offset of the offending token.
    """
    if not isinstance(text, str) or not text:
        raise MalformedEncodingError("empty encoding", 0)
    parts = text.split("_")
    if len(parts) != 3:
        raise MalformedEncodingError(
            f"expected '<block>_<base>_<stages>', found {len(parts)} '_'-separated fields", 0
        )
    block_text, base_text, stage_text = parts
    block = _BLOCK_ALIASES.get(block_text, block_text)
    if block not in BLOCK_TYPES:
        raise UnknownBlockError(f"unknown block type {block_text!r}", 0)

    base_pos = len(block_text) + 1
    if not base_text:
        raise MalformedEncodingError("missing base width", base_pos)
    if base_text.isdigit() and int(base_text) == 0:
        raise NonPositiveBaseError("base width must be positive", base_pos)
    if base_text.startswith("-") and base_text[1:].isdigit():
        raise NonPositiveBaseError("base width must be positive", base_pos)
    if not _BASE_RE.match(base_text):
        raise MalformedEncodingError(f"invalid base width {base_text!r}", base_pos)

    stage_pos = base_pos + len(base_text) + 1
    groups = stage_text.split("-")
    if len(groups) != NUM_STAGES:
        raise StageCountError(
            f"expected {NUM_STAGES} stage groups, found {len(groups)}", stage_pos
        )
    stages = []
    pos = stage_pos
    for i, group in enumerate(groups):
        if not group:
            raise EmptyStageError(f"stage {i + 2} is empty", pos)
        for j, ch in enumerate(group):
            if ch not in "12":
                raise MalformedEncodingError(f"invalid block code {ch!r}", pos + j)
        stages.append(tuple(int(ch) for ch in group))
        pos += len(group) + 1

    return BackboneEncoding(
        block, int(base_text), tuple(stages), spelling=block_text if block_text != block else None
    )


def format_backbone_encoding(enc: BackboneEncoding) -> str:
    block = enc.spelling or enc.block
    stages = "-".join("".join(str(c) for c in s) for s in enc.stages)
    return f"{block}_{enc.base}_{stages}"


# Canonical layouts of the named backbones, transcribed into the encoding
# grammar. Used for the capacity of named backbones and as the Stage-two seed.
NAMED_ENCODINGS = {
    "resnet18": "basicblock_64_11-21-21-21",
    "resnet34": "basicblock_64_111-2111-211111-211",
    "resnet50": "bottleneck_64_111-2111-211111-211",
    "resnet101": "bottleneck_64_111-2111-21111111111111111111111-211",
    "resnext50": "xbottleneck_64_111-2111-211111-211",
    "resnext101": "xbottleneck_64_111-2111-21111111111111111111111-211",
    "mobilenetv2": "mbblock_24_11-211-2111111-211",
}


def named_encoding(name: str) -> BackboneEncoding:
    try:
        return parse_backbone_encoding(NAMED_ENCODINGS[name])
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}") from None


def block_family(backbone: Backbone) -> str:
    if isinstance(backbone, BackboneEncoding):
        return backbone.block
    return named_encoding(backbone).block


# --------------------------------------------------------------------------
# Structural configuration


Backbone = Union[str, BackboneEncoding]


@dataclass(frozen=True)
class NeckConfig:
    kind: NeckKind = NeckKind.NONE
    in_low: int = 0
    in_high: int = 0
    channels: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NeckKind(self.kind))
        if self.kind is NeckKind.NONE:
            # Level and channel fields are meaningless without a neck.
            object.__setattr__(self, "in_low", 0)
            object.__setattr__(self, "in_high", 0)
            object.__setattr__(self, "channels", 0)

    @classmethod
    def fpn(cls, in_low: int, in_high: int, channels: int = 256) -> NeckConfig:
        return cls(NeckKind.FPN, in_low, in_high, channels)

    @property
    def levels(self) -> tuple[int, ...]:
        if self.kind is NeckKind.NONE:
            return ()
        return tuple(range(self.in_low, self.in_high + 1))

    def __str__(self) -> str:
        if self.kind is NeckKind.NONE:
            return "none"
        return f"fpn(P{self.in_low}-P{self.in_high},c={self.channels})"


@dataclass(frozen=True)
class HeadConfig:
    kind: HeadKind = HeadKind.FC2
    n: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        if self.kind is not HeadKind.CASCADE:
            object.__setattr__(self, "n", None)

    @property
    def stages(self) -> int:
        return self.n if self.kind is HeadKind.CASCADE else 1

    def __str__(self) -> str:
        return f"cascade(n={self.n})" if self.kind is HeadKind.CASCADE else self.kind.value


@dataclass(frozen=True, order=True)
class Resolution:
    width: int
    height: int

    @classmethod
    def parse(cls, text: str) -> Resolution:
        m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if not m:
            raise ValueError(f"resolution must look like WxH, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class StructuralConfig:
    backbone: Backbone
    neck: NeckConfig
    rpn: RpnKind
    head: HeadConfig
    resolution: Resolution

    def __post_init__(self):
        object.__setattr__(self, "rpn", RpnKind(self.rpn))

    @property
    def key(self) -> str:
        """Stable identity string."""
        return (
            f"{backbone_name(self.backbone)}|{self.neck}|{self.rpn.value}|"
            f"{self.head}|{self.resolution}"
        )

    def to_dict(self) -> dict:
        neck = {"kind": self.neck.kind.value}
        if self.neck.kind is NeckKind.FPN:
            neck.update(in_low=self.neck.in_low, in_high=self.neck.in_high,
                        channels=self.neck.channels)
        head = {"kind": self.head.kind.value}
        if self.head.kind is HeadKind.CASCADE:
            head["n"] = self.head.n
        return {
            "backbone": backbone_name(self.backbone),
            "neck": neck,
            "rpn": self.rpn.value,
            "head": head,
            "resolution": str(self.resolution),
        }

    @classmethod
    def from_dict(cls, data: dict) -> StructuralConfig:
        try:
            neck_d = data["neck"]
            if isinstance(neck_d, str):
                neck_d = {"kind": neck_d}
            neck = NeckConfig(
                neck_d["kind"],
                int(neck_d.get("in_low", 0)),
                int(neck_d.get("in_high", 0)),
                int(neck_d.get("channels", 0)),
            )
            head_d = data["head"]
            if isinstance(head_d, str):
                head_d = {"kind": head_d}
            head = HeadConfig(head_d["kind"], head_d.get("n"))
            res = data["resolution"]
            resolution = Resolution.parse(res) if isinstance(res, str) else Resolution(*res)
            return cls(
                parse_backbone(data["backbone"]), neck, RpnKind(data["rpn"]), head, resolution
            )
        except KeyError as exc:
            raise ValueError(f"structural config missing field {exc.args[0]!r}") from None


def backbone_name(backbone: Backbone) -> str:
    if isinstance(backbone, BackboneEncoding):
        return format_backbone_encoding(backbone)
    return backbone


def parse_backbone(text: str) -> Backbone:
    """A named backbone or an encoding string."""
    if text in NAMED_BACKBONES:
        return text
    if "_" in text:
        return parse_backbone_encoding(text)
    raise ValueError(f"unknown backbone {text!r}")


# --------------------------------------------------------------------------
# Space definition


@dataclass(frozen=True)
class SpaceDefinition:
    """Allowed values for every searchable field.

    FPN necks are enumerated as every contiguous level range
    ``[in_low, in_high]`` within ``fpn_min_level..fpn_max_level`` whose span
    is at least ``fpn_min_span`` levels, crossed with ``neck_channels``.
    """

    backbones: tuple[str, ...] = NAMED_BACKBONES
    allow_no_neck: bool = True
    allow_fpn: bool = True
    fpn_min_level: int = 1
    fpn_max_level: int = 6
    fpn_min_span: int = 2
    neck_channels: tuple[int, ...] = (128, 256, 512)
    rpn_kinds: tuple[RpnKind, ...] = (RpnKind.NONE, RpnKind.RPN, RpnKind.GA_RPN)
    head_kinds: tuple[HeadKind, ...] = (HeadKind.FC2, HeadKind.RETINA, HeadKind.CASCADE)
    cascade_counts: tuple[int, ...] = (2, 3, 4)
    resolutions: tuple[Resolution, ...] = (
        Resolution(512, 512),
        Resolution(800, 600),
        Resolution(1080, 720),
        Resolution(1333, 800),
    )
    base_channels: tuple[int, ...] = (48, 56, 64, 72)
    fpn_channels: tuple[int, ...] = (128, 256, 512)
    max_depth: int = DEFAULT_MAX_DEPTH
    max_doublings: int = DEFAULT_MAX_DOUBLINGS

    def __post_init__(self):
        object.__setattr__(self, "rpn_kinds", tuple(RpnKind(k) for k in self.rpn_kinds))
        object.__setattr__(self, "head_kinds", tuple(HeadKind(k) for k in self.head_kinds))
        object.__setattr__(
            self,
            "resolutions",
            tuple(r if isinstance(r, Resolution) else _as_resolution(r) for r in self.resolutions),
        )
        for name in ("backbones", "neck_channels", "cascade_counts", "base_channels", "fpn_channels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("base_channels", "fpn_channels", "neck_channels", "cascade_counts"):
            if any(v <= 0 for v in getattr(self, name)):
                raise ValueError(f"{name} must be positive")
        if not (1 <= self.fpn_min_level <= self.fpn_max_level <= MAX_LEVEL):
            raise ValueError("fpn level bounds must satisfy 1 <= min <= max <= 6")
        if self.max_depth < NUM_STAGES or self.max_doublings < 0:
            raise ValueError("modular bounds out of range")
        if self.max_depth > DEFAULT_MAX_DEPTH or self.max_doublings > DEFAULT_MAX_DOUBLINGS:
            raise ValueError("modular bounds exceed the encoding caps")

    def necks(self) -> list[NeckConfig]:
        out = [NeckConfig()] if self.allow_no_neck else []
        if not self.allow_fpn:
            return out
        for lo in range(self.fpn_min_level, self.fpn_max_level + 1):
            for hi in range(lo + max(self.fpn_min_span - 1, 1), self.fpn_max_level + 1):
                for c in self.neck_channels:
                    out.append(NeckConfig.fpn(lo, hi, c))
        return out

    def heads(self) -> list[HeadConfig]:
        out = []
        for kind in self.head_kinds:
            if kind is HeadKind.CASCADE:
                out.extend(HeadConfig(kind, n) for n in self.cascade_counts)
            else:
                out.append(HeadConfig(kind))
        return out

    def rpn_heads(self) -> list[tuple[RpnKind, HeadConfig]]:
        """Valid (rpn, head) pairs."""
        return [
            (rpn, head)
            for rpn in self.rpn_kinds
            for head in self.heads()
            if _pairing_ok(rpn, head)
        ]

    def to_dict(self) -> dict:
        return {
            "backbones": list(self.backbones),
            "allow_no_neck": self.allow_no_neck,
            "allow_fpn": self.allow_fpn,
            "fpn_min_level": self.fpn_min_level,
            "fpn_max_level": self.fpn_max_level,
            "fpn_min_span": self.fpn_min_span,
            "neck_channels": list(self.neck_channels),
            "rpn_kinds": [k.value for k in self.rpn_kinds],
            "head_kinds": [k.value for k in self.head_kinds],
            "cascade_counts": list(self.cascade_counts),
            "resolutions": [str(r) for r in self.resolutions],
            "base_channels": list(self.base_channels),
            "fpn_channels": list(self.fpn_channels),
            "max_depth": self.max_depth,
            "max_doublings": self.max_doublings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SpaceDefinition:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown space keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "resolutions" in kwargs:
            kwargs["resolutions"] = tuple(_as_resolution(r) for r in kwargs["resolutions"])
        return cls(**kwargs)


def _as_resolution(value) -> Resolution:
    if isinstance(value, Resolution):
        return value
    if isinstance(value, str):
        return Resolution.parse(value)
    return Resolution(*value)


DEFAULT_SPACE = SpaceDefinition()


# --------------------------------------------------------------------------
# Validation and enumeration


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def _pairing_ok(rpn: RpnKind, head: HeadConfig) -> bool:
    if rpn is RpnKind.NONE:
        return head.kind is HeadKind.RETINA
    return head.kind in (HeadKind.FC2, HeadKind.CASCADE)


def derive_feature_levels(backbone: Backbone) -> frozenset[int]:
    """Feature levels available to a neck.

    Levels 1-4 come from the four backbone stages at strides 4-32; levels 5
    and 6 are produced by downsampling level 4.
    """
    enc = backbone if isinstance(backbone, BackboneEncoding) else named_encoding(backbone)
    native = min(len(enc.stages), NATIVE_LEVELS)
    return frozenset(range(1, native + 1)) | frozenset({5, 6})


def validate_structural(cfg: StructuralConfig, space: SpaceDefinition = DEFAULT_SPACE) -> list[Violation]:
    """Return the list of violations; an empty list means valid."""
    out: list[Violation] = []
    bb = cfg.backbone
    if isinstance(bb, BackboneEncoding):
        if bb.base not in space.base_channels:
            out.append(Violation("backbone", f"base width {bb.base} not in {list(space.base_channels)}"))
    elif bb not in space.backbones:
        out.append(Violation("backbone", f"{bb!r} not in allowed backbones"))

    neck = cfg.neck
    if neck.kind is NeckKind.NONE:
        if not space.allow_no_neck:
            out.append(Violation("neck", "a neck is required by this space"))
    else:
        if not space.allow_fpn:
            out.append(Violation("neck", "fpn necks are not allowed by this space"))
        if not 1 <= neck.in_low < neck.in_high <= MAX_LEVEL:
            out.append(Violation("neck", f"levels must satisfy 1 <= in_low < in_high <= 6, got P{neck.in_low}-P{neck.in_high}"))
        elif not set(neck.levels) <= derive_feature_levels(bb):
            out.append(Violation("neck", "requested levels are not produced by the backbone"))
        elif not (space.fpn_min_level <= neck.in_low and neck.in_high <= space.fpn_max_level):
            out.append(Violation("neck", f"levels P{neck.in_low}-P{neck.in_high} outside the space's range"))
        elif neck.in_high - neck.in_low + 1 < space.fpn_min_span:
            out.append(Violation("neck", f"fpn must span at least {space.fpn_min_span} levels"))
        if neck.channels not in space.neck_channels:
            out.append(Violation("neck", f"channels {neck.channels} not in {list(space.neck_channels)}"))

    if cfg.rpn not in space.rpn_kinds:
        out.append(Violation("rpn", f"{cfg.rpn.value} not allowed"))

    head = cfg.head
    if head.kind not in space.head_kinds:
        out.append(Violation("head", f"{head.kind.value} not allowed"))
    if head.kind is HeadKind.CASCADE and head.n not in (2, 3, 4):
        out.append(Violation("head", f"cascade stage count must be 2..4, got {head.n}"))
    elif head.kind is HeadKind.CASCADE and head.n not in space.cascade_counts:
        out.append(Violation("head", f"cascade count {head.n} not allowed"))

    if cfg.rpn is RpnKind.NONE and head.kind is not HeadKind.RETINA:
        out.append(Violation("head", f"{head.kind.value} head requires an RPN"))
    if cfg.rpn is not RpnKind.NONE and head.kind is HeadKind.RETINA:
        out.append(Violation("rpn", "retina head is one-stage and takes no RPN"))

    res = cfg.resolution
    if res.width <= 0 or res.height <= 0:
        out.append(Violation("resolution", "width and height must be positive"))
    elif res not in space.resolutions:
        out.append(Violation("resolution", f"{res} not in allowed resolutions"))
    return out


def enumerate_structural(space: SpaceDefinition = DEFAULT_SPACE) -> Iterator[StructuralConfig]:
    """Every valid configuration once, ordered by (backbone, neck, rpn, head, resolution)."""
    pairs = space.rpn_heads()
    for bb in space.backbones:
        levels = derive_feature_levels(bb)
        for neck in space.necks():
            if not set(neck.levels) <= levels:
                continue
            for rpn, head in pairs:
                for res in space.resolutions:
                    yield StructuralConfig(bb, neck, rpn, head, res)


def structural_cardinality(space: SpaceDefinition = DEFAULT_SPACE) -> int:
    """Size of :func:`enumerate_structural` without enumerating it."""
    pairs = len(space.rpn_heads())
    total = 0
    necks = space.necks()
    for bb in space.backbones:
        levels = derive_feature_levels(bb)
        n_necks = sum(1 for n in necks if set(n.levels) <= levels)
        total += n_necks
    return total * pairs * len(space.resolutions)


# --------------------------------------------------------------------------
# Stage-two candidate


@dataclass(frozen=True)
class ModularCandidate:
    """A custom backbone plus FPN width grafted onto a Stage-one structure."""

    seed: StructuralConfig
    encoding: BackboneEncoding
    fpn_channels: int

    def __post_init__(self):
        if self.fpn_channels <= 0:
            raise ValueError("fpn_channels must be positive")
        family = block_family(self.seed.backbone)
        if self.encoding.block != family:
            raise ValueError(
                f"encoding block {self.encoding.block!r} does not match seed family {family!r}"
            )

    @property
    def key(self) -> str:
        return f"{format_backbone_encoding(self.encoding)}|fpn{self.fpn_channels}"

    def as_structural(self) -> StructuralConfig:
        neck = self.seed.neck
        if neck.kind is NeckKind.FPN:
            neck = NeckConfig.fpn(neck.in_low, neck.in_high, self.fpn_channels)
        return StructuralConfig(self.encoding, neck, self.seed.rpn, self.seed.head, self.seed.resolution)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed.to_dict(),
            "encoding": format_backbone_encoding(self.encoding),
            "fpn_channels": self.fpn_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModularCandidate:
        return cls(
            StructuralConfig.from_dict(data["seed"]),
            parse_backbone_encoding(data["encoding"]),
            int(data["fpn_channels"]),
        )
