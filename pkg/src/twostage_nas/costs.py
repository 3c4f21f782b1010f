"""Analytical FLOPs / parameter / memory-access cost of detection pipelines.

Conventions:

* ``flops`` counts one operation per multiply-accumulate, the convention
  under which ResNet18 at 224x224 costs 1.82 G.
* ``params`` counts conv and linear weights and biases plus the two affine
  parameters of every batch-norm layer.
* ``mac`` (memory-access cost) is, per conv/linear layer, the number of
  input elements read, output elements written and weights read.
* Spatial sizes use ceiling division at every stride-2 layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .space import (
    MBBLOCK_EXPANSION,
    Backbone,
    BackboneEncoding,
    HeadConfig,
    HeadKind,
    ModularCandidate,
    NeckConfig,
    NeckKind,
    Resolution,
    RpnKind,
    StructuralConfig,
)

NUM_CLASSES = 80
RPN_ANCHORS = 3
RETINA_ANCHORS = 9
ROI_POOL = 7
FC_DIM = 1024
IMAGENET_CLASSES = 1000
XBOTTLENECK_GROUPS = 32
DEFAULT_ROI_COUNT = 1000
DEFAULT_LATER_ROI_COUNT = 100


@dataclass(frozen=True)
class CostProfile:
    flops: float = 0.0
    params: float = 0.0
    mac: float = 0.0
    latency_est: float | None = None

    def __add__(self, other: CostProfile) -> CostProfile:
        return CostProfile(
            self.flops + other.flops, self.params + other.params, self.mac + other.mac
        )

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_dict(self) -> dict:
        """Exact counts, so journals reload without drift."""
        return {"flops": self.flops, "params": self.params, "mac": self.mac, "latency_ms": self.latency_est}

    def summary(self) -> dict:
        """Rounded human units for display."""
        return {
            "flops_g": round(self.flops / 1e9, 4),
            "params_m": round(self.params / 1e6, 4),
            "mac_m": round(self.mac / 1e6, 4),
            "latency_ms": None if self.latency_est is None else round(self.latency_est, 4),
        }

    @classmethod
    def from_dict(cls, data: dict) -> CostProfile:
        lat = data.get("latency_ms")
        return cls(float(data["flops"]), float(data["params"]), float(data["mac"]), None if lat is None else float(lat))


ZERO = CostProfile()


def _cdiv(x: int, s: int) -> int:
    return -(-x // s)


class _Tally:
    """Layer-by-layer accumulator."""

    def __init__(self):
        self.flops = 0.0
        self.params = 0.0
        self.mac = 0.0

    def conv(self, cin, cout, k, h, w, stride=1, groups=1, bn=True, bias=False, shared=False):
        ho, wo = (_cdiv(h, stride), _cdiv(w, stride)) if stride > 1 else (h, w)
        weights = k * k * cin * cout / groups
        self.flops += weights * ho * wo
        if not shared:
            self.params += weights + (2 * cout if bn else 0) + (cout if bias else 0)
        self.mac += cin * h * w + cout * ho * wo + weights
        return ho, wo

    def linear(self, cin, cout, rows=1, shared=False):
        self.flops += cin * cout * rows
        if not shared:
            self.params += cin * cout + cout
        self.mac += rows * (cin + cout) + cin * cout

    def pool(self, c, h, w, stride):
        ho, wo = _cdiv(h, stride), _cdiv(w, stride)
        self.mac += c * h * w + c * ho * wo
        return ho, wo

    def profile(self) -> CostProfile:
        return CostProfile(self.flops, self.params, self.mac)


# --------------------------------------------------------------------------
# Backbones


# Named backbones: (block kind, blocks per stage, inner-width multiplier per
# group of 64 planes, groups)
_RESNETS = {
    "resnet18": ("basic", (2, 2, 2, 2), 1, 1),
    "resnet34": ("basic", (3, 4, 6, 3), 1, 1),
    "resnet50": ("bottleneck", (3, 4, 6, 3), 1, 1),
    "resnet101": ("bottleneck", (3, 4, 23, 3), 1, 1),
    "resnext50": ("bottleneck", (3, 4, 6, 3), 2, 32),  # 32x4d
    "resnext101": ("bottleneck", (3, 4, 23, 3), 4, 32),  # 32x8d
}

# (expansion, output channels, repeats, first stride)
_MOBILENETV2 = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


@dataclass
class _BackboneTrace:
    profile: CostProfile
    level_channels: list[int] = field(default_factory=list)
    out_channels: int = 0


def _named_resnet(name, h, w, classifier) -> _BackboneTrace:
    kind, layout, width_mult, groups = _RESNETS[name]
    t = _Tally()
    h, w = t.conv(3, 64, 7, h, w, stride=2)
    h, w = t.pool(64, h, w, 2)
    cin = 64
    levels = []
    for si, n in enumerate(layout):
        planes = 64 * 2**si
        for bi in range(n):
            stride = 2 if (bi == 0 and si > 0) else 1
            if kind == "basic":
                out = planes
                ho, wo = t.conv(cin, planes, 3, h, w, stride)
                t.conv(planes, planes, 3, ho, wo)
            else:
                inner = planes * width_mult
                out = planes * 4
                t.conv(cin, inner, 1, h, w)
                ho, wo = t.conv(inner, inner, 3, h, w, stride, groups=groups)
                t.conv(inner, out, 1, ho, wo)
            if stride != 1 or cin != out:
                t.conv(cin, out, 1, h, w, stride)
            h, w, cin = ho, wo, out
        levels.append(cin)
    if classifier:
        t.linear(cin, IMAGENET_CLASSES)
    return _BackboneTrace(t.profile(), levels, cin)


def _inverted_residual(t: _Tally, cin, cout, expansion, h, w, stride):
    hidden = cin * expansion
    if expansion != 1:
        t.conv(cin, hidden, 1, h, w)
    ho, wo = t.conv(hidden, hidden, 3, h, w, stride, groups=hidden)
    t.conv(hidden, cout, 1, ho, wo)
    return ho, wo


def _named_mobilenetv2(h, w, classifier) -> _BackboneTrace:
    t = _Tally()
    h, w = t.conv(3, 32, 3, h, w, stride=2)
    cin = 32
    stride_total = 2
    levels = []
    for expansion, c, n, s in _MOBILENETV2:
        for i in range(n):
            stride = s if i == 0 else 1
            if stride == 2 and stride_total >= 4:
                levels.append(cin)
            h, w = _inverted_residual(t, cin, c, expansion, h, w, stride)
            stride_total *= stride
            cin = c
    t.conv(cin, 1280, 1, h, w)
    cin = 1280
    levels.append(cin)
    if classifier:
        t.linear(cin, IMAGENET_CLASSES)
    return _BackboneTrace(t.profile(), levels, cin)


def _encoded(enc: BackboneEncoding, h, w, classifier) -> _BackboneTrace:
    t = _Tally()
    base = enc.base
    h, w = t.conv(3, base, 3, h, w, stride=2)  # stage 1
    h, w = t.conv(base, base, 3, h, w, stride=2)  # first layer of stage 2
    cin = base
    width = base
    levels = []
    for si, stage in enumerate(enc.stages):
        for bi, code in enumerate(stage):
            stride = 2 if (bi == 0 and si > 0) else 1
            if code == 2:
                width *= 2
            if enc.block == "basicblock":
                out = width
                ho, wo = t.conv(cin, width, 3, h, w, stride)
                t.conv(width, width, 3, ho, wo)
                shortcut = stride != 1 or cin != out
            elif enc.block in ("bottleneck", "xbottleneck"):
                out = 4 * width
                inner, groups = (width, 1) if enc.block == "bottleneck" else (2 * width, XBOTTLENECK_GROUPS)
                t.conv(cin, inner, 1, h, w)
                ho, wo = t.conv(inner, inner, 3, h, w, stride, groups=groups)
                t.conv(inner, out, 1, ho, wo)
                shortcut = stride != 1 or cin != out
            else:
                out = width
                ho, wo = _inverted_residual(t, cin, out, MBBLOCK_EXPANSION, h, w, stride)
                shortcut = False
            if shortcut:
                t.conv(cin, out, 1, h, w, stride)
            h, w, cin = ho, wo, out
        levels.append(cin)
    if classifier:
        t.linear(cin, IMAGENET_CLASSES)
    return _BackboneTrace(t.profile(), levels, cin)


def _trace(backbone: Backbone, resolution: Resolution, classifier: bool) -> _BackboneTrace:
    h, w = resolution.height, resolution.width
    if isinstance(backbone, BackboneEncoding):
        return _encoded(backbone, h, w, classifier)
    if backbone == "mobilenetv2":
        return _named_mobilenetv2(h, w, classifier)
    if backbone in _RESNETS:
        return _named_resnet(backbone, h, w, classifier)
    raise ValueError(f"unknown backbone {backbone!r}")


def backbone_cost(
    backbone: Backbone, resolution: Resolution, include_classifier: bool = True
) -> CostProfile:
    """Cost of a named or encoded backbone.

    With ``include_classifier`` the ImageNet global-pool + 1000-way linear
    layer is counted, matching how classification backbones are usually
    reported; detection pipelines drop it.
    """
    return _trace(backbone, resolution, include_classifier).profile


def backbone_level_channels(backbone: Backbone) -> list[int]:
    """Output channels of feature levels 1-4 (strides 4, 8, 16, 32)."""
    return _trace(backbone, Resolution(64, 64), False).level_channels


def level_shape(resolution: Resolution, level: int) -> tuple[int, int]:
    """(height, width) of feature level ``level`` (stride ``2 ** (level + 1)``)."""
    h, w = resolution.height, resolution.width
    for _ in range(level + 1):
        h, w = _cdiv(h, 2), _cdiv(w, 2)
    return h, w


# --------------------------------------------------------------------------
# Neck, RPN, head


def fpn_terms(neck: NeckConfig, backbone_out_channels, resolution: Resolution) -> dict[str, CostProfile]:
    """Per-term FPN cost: ``lateral`` 1x1 convs, ``output`` 3x3 convs and
    ``extra`` stride-2 convs that produce levels 5 and 6 from level 4."""
    terms = {"lateral": _Tally(), "output": _Tally(), "extra": _Tally()}
    c = neck.channels
    for level in neck.levels:
        h, w = level_shape(resolution, level)
        if level <= 4:
            terms["lateral"].conv(backbone_out_channels[level - 1], c, 1, h, w, bn=False, bias=True)
            terms["output"].conv(c, c, 3, h, w, bn=False, bias=True)
        else:
            ph, pw = level_shape(resolution, level - 1)
            cin = backbone_out_channels[3] if level == 5 else c
            terms["extra"].conv(cin, c, 3, ph, pw, stride=2, bn=False, bias=True)
    return {k: v.profile() for k, v in terms.items()}


def neck_cost(neck: NeckConfig, backbone_out_channels, resolution: Resolution) -> CostProfile:
    if neck.kind is NeckKind.NONE:
        return ZERO
    terms = fpn_terms(neck, backbone_out_channels, resolution)
    return terms["lateral"] + terms["output"] + terms["extra"]


def neck_outputs(neck: NeckConfig, backbone_out_channels, resolution: Resolution) -> list[tuple[int, int, int]]:
    """(channels, height, width) of every map the neck hands to RPN/head.

    Without a neck, the last backbone stage (level 4) is used directly.
    """
    if neck.kind is NeckKind.NONE:
        return [(backbone_out_channels[3], *level_shape(resolution, 4))]
    return [(neck.channels, *level_shape(resolution, lv)) for lv in neck.levels]


def rpn_cost(rpn: RpnKind, neck_out) -> CostProfile:
    """Shared RPN head applied to every level.

    Per level: 3x3 conv c->c, 1x1 objectness c->A, 1x1 box regression
    c->4A with A = 3 anchors. GA-RPN adds a 1x1 location branch c->1 and a
    1x1 anchor-shape branch c->2. Weights are shared across levels.
    """
    rpn = RpnKind(rpn)
    if rpn is RpnKind.NONE:
        return ZERO
    t = _Tally()
    for i, (c, h, w) in enumerate(neck_out):
        shared = i > 0
        t.conv(c, c, 3, h, w, bn=False, bias=True, shared=shared)
        t.conv(c, RPN_ANCHORS, 1, h, w, bn=False, bias=True, shared=shared)
        t.conv(c, 4 * RPN_ANCHORS, 1, h, w, bn=False, bias=True, shared=shared)
        if rpn is RpnKind.GA_RPN:
            t.conv(c, 1, 1, h, w, bn=False, bias=True, shared=shared)
            t.conv(c, 2, 1, h, w, bn=False, bias=True, shared=shared)
    return t.profile()


def _fc2_stage(t: _Tally, c: int, rois: int):
    t.linear(ROI_POOL * ROI_POOL * c, FC_DIM, rois)
    t.linear(FC_DIM, FC_DIM, rois)
    t.linear(FC_DIM, NUM_CLASSES + 1, rois)
    t.linear(FC_DIM, 4 * NUM_CLASSES, rois)


def head_cost(
    head: HeadConfig,
    neck_out,
    roi_count: int = DEFAULT_ROI_COUNT,
    later_roi_count: int | None = DEFAULT_LATER_ROI_COUNT,
) -> CostProfile:
    """Detection head cost.

    ``fc2``: 7x7xc RoI features -> FC 1024 -> FC 1024 -> class (81) and box
    (320) predictors, per RoI. ``cascade(n)``: n such stages; the first sees
    ``roi_count`` RoIs, later ones ``later_roi_count`` (``None`` keeps
    ``roi_count`` throughout). ``retina``: per level, two subnets of four
    3x3 c->c convs, then a 3x3 class conv (9x80 outputs) and a 3x3 box conv
    (36 outputs), weights shared across levels.
    """
    t = _Tally()
    c = neck_out[0][0]
    if head.kind is HeadKind.RETINA:
        for i, (c, h, w) in enumerate(neck_out):
            shared = i > 0
            for _ in range(8):
                t.conv(c, c, 3, h, w, bn=False, bias=True, shared=shared)
            t.conv(c, RETINA_ANCHORS * NUM_CLASSES, 3, h, w, bn=False, bias=True, shared=shared)
            t.conv(c, 4 * RETINA_ANCHORS, 3, h, w, bn=False, bias=True, shared=shared)
        return t.profile()
    if roi_count <= 0:
        raise ValueError("roi_count must be positive for RoI heads")
    later = roi_count if later_roi_count is None else later_roi_count
    for stage in range(head.stages):
        _fc2_stage(t, c, roi_count if stage == 0 else later)
    return t.profile()


# --------------------------------------------------------------------------
# Latency proxy


@dataclass(frozen=True)
class LatencyModel:
    """Linear latency proxy in milliseconds.

    ``overheads`` maps ``"neck.<kind>"``, ``"rpn.<kind>"`` and
    ``"head.<kind>"`` to fixed per-module costs; cascade heads pay the head
    overhead once per stage.
    """

    t0: float = 4.0
    k_flops: float = 0.3
    k_mac: float = 0.002
    overheads: dict = field(default_factory=dict)

    def __post_init__(self):
        values = [self.t0, self.k_flops, self.k_mac, *self.overheads.values()]
        if any(v < 0 or v != v for v in values):
            raise ValueError("latency coefficients must be finite and non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> LatencyModel:
        return cls(
            float(data.get("t0_ms", cls.t0)),
            float(data.get("k_flops_ms_per_gflop", cls.k_flops)),
            float(data.get("k_mac_ms_per_million", cls.k_mac)),
            {str(k): float(v) for k, v in data.get("module_overhead_ms", {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> LatencyModel:
        if path is None:
            text = resources.files("twostage_nas.data").joinpath("latency_model.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "t0_ms": self.t0,
            "k_flops_ms_per_gflop": self.k_flops,
            "k_mac_ms_per_million": self.k_mac,
            "module_overhead_ms": dict(self.overheads),
        }


def default_latency_model() -> LatencyModel:
    return LatencyModel.load()


def estimate_latency(profile: CostProfile, cfg: StructuralConfig | None, model: LatencyModel) -> float:
    ms = model.t0 + model.k_flops * profile.flops / 1e9 + model.k_mac * profile.mac / 1e6
    if cfg is not None:
        ov = model.overheads
        ms += ov.get(f"neck.{cfg.neck.kind.value}", 0.0)
        ms += ov.get(f"rpn.{cfg.rpn.value}", 0.0)
        ms += ov.get(f"head.{cfg.head.kind.value}", 0.0) * cfg.head.stages
    return ms


# --------------------------------------------------------------------------
# Whole pipeline


def _as_structural(cfg) -> StructuralConfig:
    if isinstance(cfg, ModularCandidate):
        return cfg.as_structural()
    return cfg


def pipeline_costs(cfg: StructuralConfig | ModularCandidate) -> dict[str, CostProfile]:
    """Per-module profiles of a pipeline (backbone without classifier)."""
    cfg = _as_structural(cfg)
    trace = _trace(cfg.backbone, cfg.resolution, classifier=False)
    levels = trace.level_channels
    out = neck_outputs(cfg.neck, levels, cfg.resolution)
    return {
        "backbone": trace.profile,
        "neck": neck_cost(cfg.neck, levels, cfg.resolution),
        "rpn": rpn_cost(cfg.rpn, out),
        "head": head_cost(cfg.head, out),
    }


def total_cost(
    cfg: StructuralConfig | ModularCandidate, latency_model: LatencyModel | None = None
) -> CostProfile:
    cfg = _as_structural(cfg)
    parts = pipeline_costs(cfg)
    total = parts["backbone"] + parts["neck"] + parts["rpn"] + parts["head"]
    model = latency_model or default_latency_model()
    return replace(total, latency_est=estimate_latency(total, cfg, model))
