"""Candidate generation and the two search stages.

Stage one searches module combinations and input resolution with measured
(or estimated) latency as cost. Stage two fixes one Stage-one structure and
searches the backbone encoding and FPN width with backbone FLOPs as cost,
consulting Partial Order Pruning before each evaluation.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .coordinator import Budget, Coordinator, GenerationError, Journal
from .costs import (
    CostProfile,
    LatencyModel,
    backbone_cost,
    default_latency_model,
    total_cost,
)
from .evaluators import STAGE_ONE_TRAIN, STAGE_TWO_TRAIN, EvalResponse, TrainSpec
from .pareto import GFLOPS, LATENCY_MS, ParetoArchive
from .space import (
    DEFAULT_SPACE,
    NUM_STAGES,
    BackboneEncoding,
    ModularCandidate,
    NeckKind,
    SpaceDefinition,
    StructuralConfig,
    block_family,
    enumerate_structural,
    format_backbone_encoding,
    named_encoding,
    structural_cardinality,
    validate_structural,
)

SearchBudget = Budget
MAX_RETRIES = 20
STRUCTURAL_GROUPS = ("backbone", "neck", "rpn_head", "resolution")
BACKBONE_OPERATORS = ("insert", "delete", "toggle", "swap", "base", "fpn")


class MutationError(GenerationError):
    pass


def _pick(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


# --------------------------------------------------------------------------
# Structural moves


def random_structural(space: SpaceDefinition, rng: np.random.Generator, max_rejections: int = 1000) -> StructuralConfig:
    """Uniform sample over valid configurations (rejection over the field product)."""
    necks, heads = space.necks(), space.heads()
    if not (space.backbones and necks and space.rpn_kinds and heads and space.resolutions):
        raise GenerationError("space has an empty field")
    for _ in range(max_rejections):
        cfg = StructuralConfig(
            _pick(rng, space.backbones),
            _pick(rng, necks),
            _pick(rng, space.rpn_kinds),
            _pick(rng, heads),
            _pick(rng, space.resolutions),
        )
        if not validate_structural(cfg, space):
            return cfg
    raise GenerationError(f"no valid configuration after {max_rejections} samples")


def _structural_alternatives(cfg: StructuralConfig, space: SpaceDefinition, group: str) -> list[StructuralConfig]:
    if group == "backbone":
        options = [StructuralConfig(b, cfg.neck, cfg.rpn, cfg.head, cfg.resolution) for b in space.backbones if b != cfg.backbone]
    elif group == "neck":
        options = [StructuralConfig(cfg.backbone, n, cfg.rpn, cfg.head, cfg.resolution) for n in space.necks() if n != cfg.neck]
    elif group == "rpn_head":
        options = [
            StructuralConfig(cfg.backbone, cfg.neck, rpn, head, cfg.resolution)
            for rpn, head in space.rpn_heads()
            if (rpn, head) != (cfg.rpn, cfg.head)
        ]
    elif group == "resolution":
        options = [StructuralConfig(cfg.backbone, cfg.neck, cfg.rpn, cfg.head, r) for r in space.resolutions if r != cfg.resolution]
    else:
        raise ValueError(f"unknown mutation group {group!r}")
    return [c for c in options if not validate_structural(c, space)]


def mutate_structural_described(
    cfg: StructuralConfig, space: SpaceDefinition, rng: np.random.Generator, group: str | None = None
) -> tuple[StructuralConfig, str]:
    for _ in range(MAX_RETRIES):
        g = group or _pick(rng, STRUCTURAL_GROUPS)
        options = _structural_alternatives(cfg, space, g)
        if options:
            child = _pick(rng, options)
            return child, f"{g}: {_group_value(cfg, g)} -> {_group_value(child, g)}"
    raise MutationError(f"no alternative value for {group or 'any group'} after {MAX_RETRIES} tries")


def _group_value(cfg: StructuralConfig, group: str) -> str:
    if group == "backbone":
        return str(cfg.backbone)
    if group == "neck":
        return str(cfg.neck)
    if group == "rpn_head":
        return f"{cfg.rpn.value}+{cfg.head}"
    return str(cfg.resolution)


def mutate_structural(
    cfg: StructuralConfig, space: SpaceDefinition, rng: np.random.Generator, group: str | None = None
) -> StructuralConfig:
    """Resample one field group (``backbone``, ``neck``, ``rpn_head`` or
    ``resolution``) to a different valid value."""
    return mutate_structural_described(cfg, space, rng, group)[0]


# --------------------------------------------------------------------------
# Backbone moves


def _split(codes: Sequence[int], lengths: Sequence[int]) -> tuple[tuple[int, ...], ...]:
    out, i = [], 0
    for n in lengths:
        out.append(tuple(codes[i : i + n]))
        i += n
    return tuple(out)


def _within(enc: BackboneEncoding, space: SpaceDefinition) -> bool:
    return enc.depth <= space.max_depth and enc.doublings <= space.max_doublings


def operator_results(cand: ModularCandidate, space: SpaceDefinition, op: str) -> list[tuple[ModularCandidate, str]]:
    """Every distinct candidate one application of ``op`` can produce."""
    enc = cand.encoding
    stages = [list(s) for s in enc.stages]
    results: dict[str, tuple[ModularCandidate, str]] = {}

    def add(new_stages=None, base=None, fpn=None, desc=""):
        try:
            new_enc = BackboneEncoding(
                enc.block,
                enc.base if base is None else base,
                tuple(tuple(s) for s in (new_stages or stages)),
            )
        except ValueError:
            return
        if not _within(new_enc, space):
            return
        child = ModularCandidate(cand.seed, new_enc, cand.fpn_channels if fpn is None else fpn)
        if child.key != cand.key:
            results.setdefault(child.key, (child, desc))

    if op == "insert":
        for si, stage in enumerate(stages):
            for pos in range(len(stage) + 1):
                new = [list(s) for s in stages]
                new[si].insert(pos, 1)
                add(new, desc=f"insert 1 at stage {si + 2} pos {pos}")
    elif op == "delete":
        for si, stage in enumerate(stages):
            if len(stage) == 1:
                continue
            for pos in range(len(stage)):
                new = [list(s) for s in stages]
                del new[si][pos]
                add(new, desc=f"delete stage {si + 2} pos {pos}")
    elif op == "toggle":
        for si, stage in enumerate(stages):
            for pos, code in enumerate(stage):
                new = [list(s) for s in stages]
                new[si][pos] = 3 - code
                add(new, desc=f"toggle stage {si + 2} pos {pos} to {3 - code}")
    elif op == "swap":
        codes = list(enc.codes)
        lengths = [len(s) for s in stages]
        for i in range(len(codes) - 1):
            if codes[i] != codes[i + 1]:
                new = codes[:]
                new[i], new[i + 1] = new[i + 1], new[i]
                add(_split(new, lengths), desc=f"swap blocks {i} and {i + 1}")
    elif op == "base":
        for b in space.base_channels:
            if b != enc.base:
                add(base=b, desc=f"base {enc.base} -> {b}")
    elif op == "fpn":
        for c in space.fpn_channels:
            if c != cand.fpn_channels:
                add(fpn=c, desc=f"fpn {cand.fpn_channels} -> {c}")
    else:
        raise ValueError(f"unknown operator {op!r}")
    return list(results.values())


def backbone_neighbors(cand: ModularCandidate, space: SpaceDefinition) -> list[ModularCandidate]:
    out = []
    for op in BACKBONE_OPERATORS:
        out.extend(c for c, _ in operator_results(cand, space, op))
    return out


def mutate_backbone_described(
    cand: ModularCandidate, rng: np.random.Generator, space: SpaceDefinition = DEFAULT_SPACE, operator: str | None = None
) -> tuple[ModularCandidate, str]:
    for _ in range(MAX_RETRIES):
        op = operator or _pick(rng, BACKBONE_OPERATORS)
        options = operator_results(cand, space, op)
        if options:
            return options[int(rng.integers(len(options)))]
    raise MutationError(f"operator {operator or 'any'} inapplicable after {MAX_RETRIES} tries")


def mutate_backbone(
    cand: ModularCandidate, rng: np.random.Generator, space: SpaceDefinition = DEFAULT_SPACE, operator: str | None = None
) -> ModularCandidate:
    """Apply one randomly chosen operator: insert, delete, toggle, swap, base or fpn."""
    return mutate_backbone_described(cand, rng, space, operator)[0]


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    for cuts in combinations(range(1, total), parts - 1):
        bounds = (0, *cuts, total)
        yield tuple(bounds[i + 1] - bounds[i] for i in range(parts))


def enumerate_encodings(block: str, space: SpaceDefinition) -> Iterator[BackboneEncoding]:
    """All encodings of ``block`` within the space's base set and caps."""
    for base in space.base_channels:
        for depth in range(NUM_STAGES, space.max_depth + 1):
            for lengths in _compositions(depth, NUM_STAGES):
                for k in range(min(space.max_doublings, depth) + 1):
                    for positions in combinations(range(depth), k):
                        codes = [1] * depth
                        for p in positions:
                            codes[p] = 2
                        yield BackboneEncoding(block, base, _split(codes, lengths))


def modular_cardinality(space: SpaceDefinition) -> int:
    per_base = sum(
        math.comb(d - 1, NUM_STAGES - 1) * sum(math.comb(d, k) for k in range(min(space.max_doublings, d) + 1))
        for d in range(NUM_STAGES, space.max_depth + 1)
    )
    return per_base * len(space.base_channels) * len(space.fpn_channels)


def enumerate_modular(seed: StructuralConfig, space: SpaceDefinition) -> Iterator[ModularCandidate]:
    block = block_family(seed.backbone)
    for enc in enumerate_encodings(block, space):
        for c in space.fpn_channels:
            yield ModularCandidate(seed, enc, c)


def random_encoding(block: str, space: SpaceDefinition, rng: np.random.Generator) -> BackboneEncoding:
    base = _pick(rng, space.base_channels)
    depth = int(rng.integers(NUM_STAGES, space.max_depth + 1))
    cuts = sorted(rng.choice(np.arange(1, depth), size=NUM_STAGES - 1, replace=False).tolist())
    bounds = (0, *cuts, depth)
    lengths = [bounds[i + 1] - bounds[i] for i in range(NUM_STAGES)]
    k = int(rng.integers(0, min(space.max_doublings, depth) + 1))
    codes = [1] * depth
    for p in rng.choice(depth, size=k, replace=False).tolist():
        codes[p] = 2
    return BackboneEncoding(block, base, _split(codes, lengths))


def seed_encoding(seed: StructuralConfig, space: SpaceDefinition) -> BackboneEncoding:
    """Encoding analog of the seed backbone, projected into the space.

    Stages are trimmed from the end until the depth cap holds, surplus
    doublings are dropped from the end, and the base snaps to the nearest
    allowed width.
    """
    enc = seed.backbone if isinstance(seed.backbone, BackboneEncoding) else named_encoding(seed.backbone)
    stages = [list(s) for s in enc.stages]
    while sum(map(len, stages)) > space.max_depth:
        longest = max(range(NUM_STAGES), key=lambda i: (len(stages[i]), i))
        stages[longest].pop()
    extra = sum(s.count(2) for s in stages) - space.max_doublings
    for s in reversed(stages):
        for i in reversed(range(len(s))):
            if extra > 0 and s[i] == 2:
                s[i] = 1
                extra -= 1
    base = min(space.base_channels, key=lambda b: (abs(b - enc.base), b))
    return BackboneEncoding(enc.block, base, tuple(tuple(s) for s in stages))


# --------------------------------------------------------------------------
# Stage problems


@dataclass
class StageOneProblem:
    space: SpaceDefinition = DEFAULT_SPACE
    latency_model: LatencyModel | None = None
    stage: str = "one"
    objective_kind: str = LATENCY_MS
    prunable: bool = False

    def __post_init__(self):
        self.latency_model = self.latency_model or default_latency_model()

    def initial(self, rng, n):
        return [(random_structural(self.space, rng), "random") for _ in range(n)]

    def mutate(self, payload, rng):
        return mutate_structural_described(payload, self.space, rng)

    def random(self, rng):
        return random_structural(self.space, rng), "random"

    def enumerate(self):
        if structural_cardinality(self.space) > Coordinator.enumerate_limit:
            return None
        return enumerate_structural(self.space)

    def cost(self, payload) -> CostProfile:
        return total_cost(payload, self.latency_model)

    def objective_cost(self, payload, cost: CostProfile, response: EvalResponse | None) -> float:
        if response is not None and response.measured_latency_ms is not None:
            return response.measured_latency_ms
        return cost.latency_est


@dataclass
class StageTwoProblem:
    seed: StructuralConfig
    space: SpaceDefinition = DEFAULT_SPACE
    latency_model: LatencyModel | None = None
    stage: str = "two"
    objective_kind: str = GFLOPS
    prunable: bool = True

    def __post_init__(self):
        self.latency_model = self.latency_model or default_latency_model()
        self.block = block_family(self.seed.backbone)
        neck = self.seed.neck
        if neck.kind is NeckKind.FPN and neck.channels in self.space.fpn_channels:
            self.fpn0 = neck.channels
        else:
            self.fpn0 = self.space.fpn_channels[0]

    def analog(self) -> ModularCandidate:
        return ModularCandidate(self.seed, seed_encoding(self.seed, self.space), self.fpn0)

    def initial(self, rng, n):
        first = self.analog()
        out = [(first, "seed analog")]
        keys = {first.key}
        attempts = 0
        while len(out) < n and attempts < 50 * n:
            attempts += 1
            child, desc = first, []
            for _ in range(int(rng.integers(1, 4))):
                try:
                    child, d = mutate_backbone_described(child, rng, self.space)
                except MutationError:
                    break
                desc.append(d)
            if child.key not in keys:
                keys.add(child.key)
                out.append((child, "; ".join(desc)))
        return out

    def mutate(self, payload, rng):
        return mutate_backbone_described(payload, rng, self.space)

    def random(self, rng):
        enc = random_encoding(self.block, self.space, rng)
        return ModularCandidate(self.seed, enc, _pick(rng, self.space.fpn_channels)), "random"

    def enumerate(self):
        if modular_cardinality(self.space) > Coordinator.enumerate_limit:
            return None
        # Deepest and widest first, so that evaluated successors exist when
        # smaller candidates come up for pruning.
        return sorted(
            enumerate_modular(self.seed, self.space),
            key=lambda c: (-c.encoding.depth, -c.encoding.base, -c.fpn_channels, c.key),
        )

    def cost(self, payload) -> CostProfile:
        return total_cost(payload, self.latency_model)

    def objective_cost(self, payload, cost: CostProfile, response: EvalResponse | None) -> float:
        return backbone_cost(payload.encoding, self.seed.resolution, include_classifier=False).flops / 1e9


# --------------------------------------------------------------------------
# Stage drivers


def _pool(evaluator) -> list:
    return list(evaluator) if isinstance(evaluator, (list, tuple)) else [evaluator]


def build_stage_one(
    space: SpaceDefinition,
    evaluator,
    budget: Budget,
    journal: Journal | str | Path | None = None,
    *,
    latency_model: LatencyModel | None = None,
    train: TrainSpec = STAGE_ONE_TRAIN,
    config: dict | None = None,
    deterministic: bool = True,
    max_consecutive_failures: int = 10,
) -> Coordinator:
    problem = StageOneProblem(space, latency_model)
    return Coordinator(
        problem,
        _pool(evaluator),
        budget,
        journal,
        config=config if config is not None else _default_config("one", space, budget, False),
        pruning=False,
        deterministic=deterministic,
        max_consecutive_failures=max_consecutive_failures,
        train=train,
    )


def build_stage_two(
    seed: StructuralConfig,
    evaluator,
    budget: Budget,
    journal: Journal | str | Path | None = None,
    *,
    space: SpaceDefinition = DEFAULT_SPACE,
    pruning: bool = True,
    latency_model: LatencyModel | None = None,
    train: TrainSpec = STAGE_TWO_TRAIN,
    config: dict | None = None,
    deterministic: bool = True,
    max_consecutive_failures: int = 10,
) -> Coordinator:
    problem = StageTwoProblem(seed, space, latency_model)
    if config is None:
        config = _default_config("two", space, budget, pruning)
        config["seed_config"] = seed.to_dict()
    return Coordinator(
        problem,
        _pool(evaluator),
        budget,
        journal,
        config=config,
        pruning=pruning,
        deterministic=deterministic,
        max_consecutive_failures=max_consecutive_failures,
        train=train,
    )


def _default_config(stage: str, space: SpaceDefinition, budget: Budget, pruning: bool) -> dict:
    return {
        "stage": stage,
        "space": space.to_dict(),
        "budget": {
            "max_evaluations": budget.max_evaluations,
            "initial_population": budget.initial_population,
            "mutations_per_round": budget.mutations_per_round,
            "rng_seed": budget.rng_seed,
        },
        "pruning": pruning,
        "objective_kind": GFLOPS if stage == "two" else LATENCY_MS,
    }


def run_stage_one(space: SpaceDefinition, evaluator, budget: Budget, journal=None, **kwargs) -> ParetoArchive:
    """Evolutionary search over module combinations; cost is latency in ms."""
    coord = build_stage_one(space, evaluator, budget, journal, **kwargs)
    coord.start()
    return coord.run()


def run_stage_two(seed: StructuralConfig, evaluator, budget: Budget, journal=None, **kwargs) -> ParetoArchive:
    """Backbone/FPN-width search around ``seed``; cost is backbone GFLOPs."""
    coord = build_stage_two(seed, evaluator, budget, journal, **kwargs)
    coord.start()
    return coord.run()


# --------------------------------------------------------------------------
# Seed selection


def select_records(archive: ParetoArchive, k: int = 6) -> list:
    """``k`` front members at evenly spaced quantiles of log-cost, both ends included."""
    if k < 1:
        raise ValueError("k must be at least 1")
    front = sorted(archive.front, key=lambda r: (r.objective.cost, -r.objective.accuracy, r.id))
    if len(front) <= k:
        return front
    costs = [r.objective.cost for r in front]
    scale = (lambda c: math.log(c)) if min(costs) > 0 else (lambda c: c)
    xs = [scale(c) for c in costs]
    lo, hi = xs[0], xs[-1]
    targets = [(lo + hi) / 2] if k == 1 else [lo + (hi - lo) * i / (k - 1) for i in range(k)]
    chosen: list[int] = []
    for t in targets:
        free = [i for i in range(len(front)) if i not in chosen]
        chosen.append(min(free, key=lambda i: (abs(xs[i] - t), i)))
    return [front[i] for i in sorted(chosen)]


def select_candidates(archive: ParetoArchive, k: int = 6) -> list:
    return [r.payload for r in select_records(archive, k)]


__all__ = [
    "ModularCandidate",
    "MutationError",
    "SearchBudget",
    "enumerate_modular",
    "format_backbone_encoding",
    "modular_cardinality",
    "mutate_backbone",
    "mutate_structural",
    "random_structural",
    "run_stage_one",
    "run_stage_two",
    "select_candidates",
]
