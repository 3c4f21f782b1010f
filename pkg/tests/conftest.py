import sys
from dataclasses import replace

import pytest

from twostage_nas.space import (
    DEFAULT_SPACE,
    HeadConfig,
    HeadKind,
    NeckConfig,
    Resolution,
    RpnKind,
    StructuralConfig,
)

# 2 backbones x {no neck + retina, no neck + (rpn, fc2)} x 2 resolutions = 8 configs
TINY_STRUCTURAL = replace(
    DEFAULT_SPACE,
    backbones=("resnet18", "resnet50"),
    allow_fpn=False,
    rpn_kinds=(RpnKind.NONE, RpnKind.RPN),
    head_kinds=(HeadKind.RETINA, HeadKind.FC2),
    resolutions=(Resolution(512, 512), Resolution(800, 600)),
)

# A few hundred configs: enough for the search to have to work.
SMALL_STRUCTURAL = replace(
    DEFAULT_SPACE,
    backbones=("resnet18", "resnet50", "mobilenetv2"),
    fpn_min_level=1,
    fpn_max_level=5,
    neck_channels=(128, 256),
    fpn_min_span=3,
    cascade_counts=(3,),
    resolutions=(Resolution(512, 512), Resolution(800, 600)),
)

# 2 bases x depth 4..8 x at most one doubling, one FPN width: 1148 candidates
TINY_MODULAR = replace(DEFAULT_SPACE, base_channels=(48, 64), max_depth=8, max_doublings=1, fpn_channels=(256,))

# Small enough for BFS reachability checks.
MICRO_MODULAR = replace(DEFAULT_SPACE, base_channels=(48, 64), max_depth=6, max_doublings=2, fpn_channels=(128, 256))

R18_SEED = StructuralConfig(
    "resnet18", NeckConfig.fpn(2, 5, 256), RpnKind.RPN, HeadConfig(HeadKind.FC2), Resolution(512, 512)
)


@pytest.fixture
def tiny_structural():
    return TINY_STRUCTURAL


@pytest.fixture
def tiny_modular():
    return TINY_MODULAR


@pytest.fixture
def r18_seed():
    return R18_SEED


def exhaustive_front(problem, payloads, profile=None):
    """Keys of the Pareto front over every payload, scored exactly as the search scores them."""
    import oracles

    from twostage_nas.evaluators import (
        EvalRequest,
        default_surrogate_profile,
        synthetic_accuracy,
    )

    profile = profile or default_surrogate_profile()
    scored = []
    for p in payloads:
        resp = synthetic_accuracy(EvalRequest.for_payload("x", p), profile)
        scored.append((p.key, problem.objective_cost(p, problem.cost(p), resp), resp.accuracy))
    return {scored[i][0] for i in oracles.pareto_front_bruteforce([(c, a) for _, c, a in scored])}


def front_keys(archive):
    return {r.key for r in archive.front}


@pytest.fixture(scope="session")
def pop_runs(tmp_path_factory):
    """Stage two on TINY_MODULAR with and without pruning: {pruning: (archive, calls, journal)}."""
    import time

    from twostage_nas.coordinator import Budget
    from twostage_nas.evaluators import SurrogateEvaluator
    from twostage_nas.evolution import modular_cardinality, run_stage_two

    d = tmp_path_factory.mktemp("pop")
    out = {}
    started = time.perf_counter()
    for pruning in (True, False):
        path = d / f"pop-{pruning}.jsonl"
        ev = SurrogateEvaluator()
        arc = run_stage_two(R18_SEED, ev, Budget(modular_cardinality(TINY_MODULAR)), path, space=TINY_MODULAR, pruning=pruning)
        out[pruning] = (arc, ev.calls, path)
    out["seconds"] = time.perf_counter() - started
    return out


def synthetic_journal(path, n=300, seed=0, slope=0.5, noise=0.3):
    """Stage-two journal whose accuracy is ``slope * depth`` plus seeded Gaussian noise."""
    import numpy as np

    from twostage_nas.coordinator import OK, EvalRecord, Journal
    from twostage_nas.evolution import random_encoding
    from twostage_nas.pareto import GFLOPS, ObjectivePoint
    from twostage_nas.space import ModularCandidate

    rng = np.random.default_rng(seed)
    with Journal(path, fsync=False) as j:
        for i in range(n):
            enc = random_encoding("basicblock", DEFAULT_SPACE, rng)
            acc = float(min(100.0, 10.0 + slope * enc.depth + rng.normal(0.0, noise)))
            rec = EvalRecord(
                f"two-{i:05d}",
                ModularCandidate(R18_SEED, enc, 256),
                stage="two",
                objective=ObjectivePoint(enc.depth * enc.base / 100.0, acc, GFLOPS),
                status=OK,
            )
            j.append({"entry_type": "record", "record": rec.to_dict()})
    return path


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
