"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are printed at the end
of the session (see ``pytest_terminal_summary`` in conftest) and also inline
when running with ``-s``.
"""

import time

import numpy as np
import oracles
from conftest import (
    MICRO_MODULAR,
    R18_SEED,
    SMALL_STRUCTURAL,
    TINY_MODULAR,
    exhaustive_front,
    front_keys,
    synthetic_journal,
)

from twostage_nas.analysis import (
    correlation_matrix,
    factor_table,
    journal_records,
    pearson,
)
from twostage_nas.coordinator import (
    OK,
    PRUNED,
    Budget,
    read_journal,
    replay_entries,
    resume,
)
from twostage_nas.costs import backbone_cost
from twostage_nas.evaluators import (
    EvalRequest,
    SurrogateEvaluator,
    default_surrogate_profile,
    synthetic_accuracy,
)
from twostage_nas.evolution import (
    StageOneProblem,
    StageTwoProblem,
    build_stage_one,
    build_stage_two,
    enumerate_modular,
    modular_cardinality,
    mutate_backbone,
    run_stage_one,
)
from twostage_nas.pareto import (
    LATENCY_MS,
    ObjectivePoint,
    ParetoArchive,
    candidate_precedes,
    dominates,
    nondominated_sort,
)
from twostage_nas.space import (
    DEFAULT_SPACE,
    ModularCandidate,
    Resolution,
    enumerate_structural,
    format_backbone_encoding,
    parse_backbone_encoding,
    structural_cardinality,
)

RESULTS = {}

R224 = Resolution(224, 224)
SEARCHED = {
    "E0": "basicblock_64_1-21-21-12",
    "E1": "basicblock_56_111-2111-2-111112",
    "E2": "basicblock_48_12-11111-211-1112",
    "E3": "bottleneck_56_211-111111111-2111111-11112111",
    "E4": "Xbottleneck_56_21-21-111111111111111-2111111",
    "E5": "Xbottleneck_56_21-21-11111111111111-21111111",
}


def report(n, checks):
    """``checks`` is a list of (label, ok, detail). Records and asserts the criterion."""
    failed = [f"{label} ({detail})" for label, ok, detail in checks if not ok]
    status = "PASS" if not failed else "FAIL"
    summary = f"criterion {n}: {status}: " + ("all %d checks" % len(checks) if not failed else "; ".join(failed))
    RESULTS[n] = summary
    print(summary)
    assert not failed, summary


def within(label, value, target, rel):
    err = value / target - 1
    return label, abs(err) <= rel, f"{value:.4g} vs {target} ({err:+.1%}, tol {rel:.0%})"


def test_criterion_01_named_backbones():
    targets = {
        "resnet18": (1.83, 0.03, 11.68, 0.02),
        "resnet34": (3.68, 0.03, 21.80, 0.02),
        "resnet101": (7.88, 0.03, 44.55, 0.02),
        "resnext101": (16.55, 0.05, 88.79, 0.03),
    }
    checks = []
    for name, (g, gt, m, mt) in targets.items():
        c = backbone_cost(name, R224)
        checks.append(within(f"{name} flops", c.flops / 1e9, g, gt))
        checks.append(within(f"{name} params", c.params / 1e6, m, mt))
    report(1, checks)


def test_criterion_02_encoded_backbones():
    targets = {
        "E0": (1.37, 8.15),
        "E1": (2.74, 15.35),
        "E2": (2.46, 9.92),
        "E3": (3.11, 29.96),
        "E4": (7.58, 43.14),
        "E5": (7.58, 45.74),
    }
    checks = []
    for name, (g, m) in targets.items():
        c = backbone_cost(parse_backbone_encoding(SEARCHED[name]), R224)
        checks.append(within(f"{name} flops", c.flops / 1e9, g, 0.05))
        checks.append(within(f"{name} params", c.params / 1e6, m, 0.05))
    report(2, checks)


def test_criterion_03_resolution_scaling():
    checks = [
        within("E0 @512x512", backbone_cost(parse_backbone_encoding(SEARCHED["E0"]), Resolution(512, 512)).flops / 1e9, 7.16, 0.05),
        within("resnet18 @512x512", backbone_cost("resnet18", Resolution(512, 512)).flops / 1e9, 9.54, 0.05),
        within("E5 @1333x800", backbone_cost(parse_backbone_encoding(SEARCHED["E5"]), Resolution(1333, 800)).flops / 1e9, 162.45, 0.05),
    ]
    report(3, checks)


def test_criterion_04_dominance_fixtures():
    P = lambda c, a: ObjectivePoint(c, a, LATENCY_MS)
    checks = [
        ("(43.6, 36.3) dominates (46.7, 34.8)", dominates(P(43.6, 36.3), P(46.7, 34.8)) is True, "expected True"),
        ("(54.9, 39.3) dominates (72.0, 39.1)", dominates(P(54.9, 39.3), P(72.0, 39.1)) is True, "expected True"),
        ("(38.4, 80.4) vs (34.8, 79.7)", dominates(P(38.4, 80.4), P(34.8, 79.7)) is False, "expected False"),
        ("(34.8, 79.7) vs (38.4, 80.4)", dominates(P(34.8, 79.7), P(38.4, 80.4)) is False, "expected False"),
    ]
    report(4, checks)


class _Rec:
    def __init__(self, i, c, a):
        self.id = self.key = f"r{i:03d}"
        self.objective = ObjectivePoint(float(c), float(a), LATENCY_MS)


def test_criterion_05_oracle_equivalence():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(100):
        if trial % 2:
            pts = rng.integers(0, 30, size=(200, 2)).astype(float)
        else:
            pts = np.column_stack([rng.uniform(1, 100, 200), rng.uniform(0, 100, 200)])
        recs = [_Rec(i, c, a) for i, (c, a) in enumerate(pts)]
        brute = {recs[i].id for i in oracles.pareto_front_bruteforce([tuple(p) for p in pts])}
        mismatches += {r.id for r in nondominated_sort(recs)[0]} != brute
    recs = [_Rec(i, c, a) for i, (c, a) in enumerate(rng.integers(0, 12, size=(50, 2)))]
    fronts = set()
    for _ in range(20):
        arc = ParetoArchive(LATENCY_MS)
        for i in rng.permutation(50):
            arc.insert(recs[i])
        fronts.add(frozenset(arc.front_ids()))
    report(
        5,
        [
            ("rank-0 vs brute force on 100 sets of 200", mismatches == 0, f"{mismatches} mismatching sets"),
            ("archive front over 20 insertion orders", len(fronts) == 1, f"{len(fronts)} distinct fronts"),
        ],
    )


def test_criterion_06_exhaustive_front_recovery(pop_runs):
    started = time.perf_counter()
    n = structural_cardinality(SMALL_STRUCTURAL)
    arc1 = run_stage_one(SMALL_STRUCTURAL, SurrogateEvaluator(), Budget(n, rng_seed=3))
    exp1 = exhaustive_front(StageOneProblem(SMALL_STRUCTURAL), enumerate_structural(SMALL_STRUCTURAL))
    arc2 = pop_runs[True][0]
    exp2 = exhaustive_front(StageTwoProblem(R18_SEED, TINY_MODULAR), enumerate_modular(R18_SEED, TINY_MODULAR))
    elapsed = time.perf_counter() - started + pop_runs["seconds"]
    report(
        6,
        [
            ("structural space size", n <= 500, f"{n} configs"),
            ("modular space size", modular_cardinality(TINY_MODULAR) <= 2000, f"{modular_cardinality(TINY_MODULAR)} encodings"),
            ("stage one front", front_keys(arc1) == exp1, f"{len(front_keys(arc1))} found vs {len(exp1)} exhaustive"),
            ("stage two front", front_keys(arc2) == exp2, f"{len(front_keys(arc2))} found vs {len(exp2)} exhaustive"),
            ("runtime", elapsed < 120, f"{elapsed:.1f}s"),
        ],
    )


def _journal_counts(path):
    records = replay_entries(read_journal(path)).records.values()
    return sum(r.status == OK for r in records), sum(r.status == PRUNED for r in records)


def test_criterion_07_pop_soundness_and_savings(pop_runs):
    on_calls, on_pruned = _journal_counts(pop_runs[True][2])
    off_calls, _ = _journal_counts(pop_runs[False][2])
    savings = 1 - on_calls / off_calls
    profile = default_surrogate_profile()
    rng = np.random.default_rng(7)
    pool = [ModularCandidate(R18_SEED, parse_backbone_encoding("basicblock_48_1-1-1-1"), 128)]
    for _ in range(400):
        pool.append(mutate_backbone(pool[int(rng.integers(len(pool)))], rng, MICRO_MODULAR))
    acc = [synthetic_accuracy(EvalRequest.for_payload("x", c), profile).accuracy for c in pool]
    pairs = violations = 0
    for i, a in enumerate(pool):
        for j, b in enumerate(pool):
            if candidate_precedes(a, b):
                pairs += 1
                violations += acc[i] > acc[j]
    report(
        7,
        [
            ("identical fronts", front_keys(pop_runs[True][0]) == front_keys(pop_runs[False][0]), "fronts differ"),
            ("savings >= 30%", savings >= 0.30, f"{on_calls} vs {off_calls} calls, {savings:.1%}, {on_pruned} pruned"),
            ("journal calls match evaluator calls", (on_calls, off_calls) == (pop_runs[True][1], pop_runs[False][1]), "mismatch"),
            ("surrogate monotone under the partial order", violations == 0 and pairs > 1000, f"{violations} of {pairs} pairs"),
        ],
    )


class _Crash(BaseException):
    pass


class _CrashAt(SurrogateEvaluator):
    def __init__(self, at):
        super().__init__()
        self.at = at

    def evaluate(self, req):
        if self.calls == self.at:
            raise _Crash(req.id)
        return super().evaluate(req)


def test_criterion_08_determinism_and_resume(tmp_path):
    budget = Budget(60, initial_population=8, mutations_per_round=4, rng_seed=11)
    make_one = lambda path, ev=None: build_stage_one(SMALL_STRUCTURAL, ev or SurrogateEvaluator(), budget, path)
    make_two = lambda path, ev=None: build_stage_two(R18_SEED, ev or SurrogateEvaluator(), budget, path, space=TINY_MODULAR)
    checks = []
    for stage, make in (("one", make_one), ("two", make_two)):
        paths = [tmp_path / f"{stage}-{k}.jsonl" for k in "ab"]
        fronts = []
        for p in paths:
            coord = make(p)
            coord.start()
            fronts.append(front_keys(coord.run()))
        checks.append((f"stage {stage} byte-identical journals", paths[0].read_bytes() == paths[1].read_bytes(), "bytes differ"))
        points = np.random.default_rng(99).choice(np.arange(1, 55), size=5, replace=False)
        for point in sorted(int(p) for p in points):
            path = tmp_path / f"{stage}-crash{point}.jsonl"
            coord = make(path, _CrashAt(point))
            coord.start()
            try:
                coord.run()
                crashed = False
            except _Crash:
                crashed = True
            arc = resume(make(path), path)
            checks.append(
                (f"stage {stage} crash at call {point}", crashed and front_keys(arc) == fronts[0], f"crashed={crashed}, fronts differ")
            )
    report(8, checks)


def test_criterion_09_analysis_recovery(tmp_path):
    recs = journal_records(synthetic_journal(tmp_path / "planted.jsonl", n=300, seed=5))
    r = correlation_matrix(factor_table(recs)).get("depth", "accuracy")
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(3, 200)))
        y = rng.normal(size=x.size) + rng.uniform(-2, 2) * x
        worst = max(worst, abs(pearson(x, y) - oracles.pearson_direct(list(x), list(y))))
    report(
        9,
        [
            ("corr(depth, accuracy) > 0.9", r > 0.9, f"r = {r:.4f}"),
            ("Pearson vs direct formula to 1e-12", worst <= 1e-12, f"max error {worst:.2e}"),
        ],
    )


def test_criterion_10_grammar():
    checks = []
    for name, text in SEARCHED.items():
        enc = parse_backbone_encoding(text)
        checks.append((f"{name} round trip", format_backbone_encoding(enc) == text and parse_backbone_encoding(str(enc)) == enc, text))
    rng = np.random.default_rng(10)
    start = ModularCandidate(R18_SEED, parse_backbone_encoding(SEARCHED["E0"]), 256)
    current, bad = start, 0
    for _ in range(10_000):
        child = mutate_backbone(current, rng, DEFAULT_SPACE)
        enc = child.encoding
        try:
            ok = parse_backbone_encoding(str(enc)) == enc
        except ValueError:
            ok = False
        ok = ok and enc.depth <= DEFAULT_SPACE.max_depth and enc.doublings <= DEFAULT_SPACE.max_doublings
        ok = ok and len(enc.stages) == 4 and all(enc.stages) and enc.block == "basicblock"
        bad += not ok
        current = child if rng.random() < 0.9 else start
    checks.append(("10^4 fuzzed mutations", bad == 0, f"{bad} invalid"))
    report(10, checks)
