"""Command-line entry point: validate, cost, search, select, analyze, export.

Exit codes: 0 success, 2 input or config error, 3 I/O error, 4 evaluator or
runtime error. Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .analysis import (
    AnalysisError,
    correlation_matrix,
    factor_table,
    front_rows,
    journal_records,
    render_front,
)
from .coordinator import (
    OK,
    PRUNED,
    Budget,
    ConfigMismatchError,
    EvaluatorAbort,
    GenerationError,
    JournalCorruptError,
    journal_dir,
    read_journal,
    replay_entries,
    resume,
)
from .costs import LatencyModel, backbone_cost, default_latency_model, total_cost
from .evaluators import (
    EvaluatorLaunchError,
    ExternalEvaluator,
    SurrogateEvaluator,
    SurrogateProfile,
)
from .evolution import build_stage_one, build_stage_two, select_records
from .pareto import GFLOPS, LATENCY_MS, nondominated_sort
from .space import (
    NAMED_ENCODINGS,
    EncodingError,
    Resolution,
    SpaceDefinition,
    StructuralConfig,
    parse_backbone_encoding,
    validate_structural,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

log = logging.getLogger("twostage_nas")


class ConfigError(ValueError):
    pass


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_mapping(path: str | Path) -> dict:
    """Read a YAML or JSON mapping (JSON is a YAML subset)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


# --------------------------------------------------------------------------
# validate / cost


def cmd_validate(args) -> int:
    if args.encoding is not None:
        try:
            enc = parse_backbone_encoding(args.encoding)
        except EncodingError as exc:
            _emit({"valid": False, "violations": [{"field": "encoding", "rule": str(exc), "position": exc.position}]})
            return EXIT_INPUT
        _emit(
            {
                "valid": True,
                "normalized": str(enc),
                "block": enc.block,
                "base": enc.base,
                "depth": enc.depth,
                "doublings": enc.doublings,
                "stages": [len(s) for s in enc.stages],
            }
        )
        return EXIT_OK
    data = _load_mapping(args.config)
    space = _space(data.get("space")) if "space" in data else SpaceDefinition()
    try:
        cfg = StructuralConfig.from_dict(data.get("config", data))
    except (KeyError, TypeError, ValueError) as exc:
        _emit({"valid": False, "violations": [{"field": "config", "rule": str(exc)}]})
        return EXIT_INPUT
    violations = validate_structural(cfg, space)
    if violations:
        _emit({"valid": False, "violations": [{"field": v.field, "rule": v.rule} for v in violations]})
        return EXIT_INPUT
    _emit({"valid": True, "normalized": cfg.to_dict(), "key": cfg.key})
    return EXIT_OK


def cmd_cost(args) -> int:
    latency = LatencyModel.load(args.latency_model) if args.latency_model else default_latency_model()
    if args.config is not None:
        data = _load_mapping(args.config)
        cfg = StructuralConfig.from_dict(data.get("config", data))
        if args.resolution:
            cfg = StructuralConfig(cfg.backbone, cfg.neck, cfg.rpn, cfg.head, Resolution.parse(args.resolution))
        violations = validate_structural(cfg, SpaceDefinition())
        if violations:
            raise ConfigError("; ".join(f"{v.field}: {v.rule}" for v in violations))
        _emit(total_cost(cfg, latency).summary())
        return EXIT_OK
    res = Resolution.parse(args.resolution or "224x224")
    if args.backbone is not None:
        if args.backbone not in NAMED_ENCODINGS:
            raise ConfigError(f"unknown backbone {args.backbone!r}; choose from {sorted(NAMED_ENCODINGS)}")
        backbone = args.backbone
    else:
        backbone = parse_backbone_encoding(args.encoding)
    _emit(backbone_cost(backbone, res, include_classifier=not args.no_classifier).summary())
    return EXIT_OK


# --------------------------------------------------------------------------
# search


def _space(value, base_dir: Path = Path(".")) -> SpaceDefinition:
    if value is None:
        return SpaceDefinition()
    if isinstance(value, str):
        value = _load_mapping(_resolve(value, base_dir))
    try:
        return SpaceDefinition.from_dict(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"space: {exc}") from exc


def _resolve(path: str, base_dir: Path) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = base_dir / p
    if not p.exists():
        raise ConfigError(f"referenced file does not exist: {p}")
    return p


def _evaluators(spec: dict, base_dir: Path, resolved: dict):
    kind = spec.get("kind", "surrogate")
    if kind == "surrogate":
        profile_path = spec.get("profile")
        profile = SurrogateProfile.load(_resolve(profile_path, base_dir) if profile_path else None)
        resolved["evaluator"] = {"kind": "surrogate", "profile": profile.to_dict()}
        return [SurrogateEvaluator(profile)]
    if kind == "external":
        command = spec.get("command")
        if isinstance(command, str):
            command = command.split()
        if not command:
            raise ConfigError("evaluator.command is required for external evaluators")
        workers = int(spec.get("workers", 1))
        timeout = float(spec.get("timeout", 600))
        resolved["evaluator"] = {"kind": "external", "command": list(command), "workers": workers, "timeout": timeout}
        return [ExternalEvaluator(list(command), timeout=timeout, cwd=base_dir) for _ in range(workers)]
    raise ConfigError(f"unknown evaluator kind {kind!r}")


def _seed_config(args, data: dict, base_dir: Path) -> StructuralConfig:
    if args.seed_journal:
        recs = select_records(replay_entries(read_journal(args.seed_journal)).archive(LATENCY_MS), args.k or 6)
        if not recs:
            raise ConfigError("seed journal has an empty front")
        if not 0 <= args.seed_index < len(recs):
            raise ConfigError(f"seed index {args.seed_index} out of range 0..{len(recs) - 1}")
        return recs[args.seed_index].payload
    raw = data.get("seed_config")
    if args.seed_config:
        raw = args.seed_config
    if raw is None:
        raise ConfigError("stage two needs seed_config (config key, --seed-config or --seed-journal)")
    if isinstance(raw, str):
        raw = _load_mapping(_resolve(raw, base_dir))
    try:
        return StructuralConfig.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"seed_config: {exc}") from exc


def build_from_config(args):
    """Resolve a run configuration (file plus flag overrides, flags win)."""
    data = _load_mapping(args.config) if args.config else {}
    base_dir = Path(args.config).parent if args.config else Path(".")
    space = _space(data.get("space"), base_dir)
    budget_raw = dict(data.get("budget", {}))
    if args.max_evaluations is not None:
        budget_raw["max_evaluations"] = args.max_evaluations
    seed = args.seed if args.seed is not None else data.get("rng_seed", budget_raw.get("rng_seed"))
    if seed is None:
        if args.deterministic:
            raise ConfigError("deterministic mode needs rng_seed (config) or --seed")
        seed = 0
    try:
        budget = Budget(
            max_evaluations=int(budget_raw.get("max_evaluations", 100)),
            initial_population=int(budget_raw.get("initial_population", 10)),
            mutations_per_round=int(budget_raw.get("mutations_per_round", 10)),
            rng_seed=int(seed),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"budget: {exc}") from exc
    expected = LATENCY_MS if args.stage == "one" else GFLOPS
    objective = data.get("objective", expected)
    if objective != expected:
        raise ConfigError(f"stage {args.stage} ranks by {expected}, config asks for {objective}")
    lm_path = data.get("latency_model")
    latency = LatencyModel.load(_resolve(lm_path, base_dir)) if lm_path else default_latency_model()
    pruning = bool(data.get("pruning", True)) and not args.no_pruning

    resolved = {
        "stage": args.stage,
        "space": space.to_dict(),
        "budget": {
            "max_evaluations": budget.max_evaluations,
            "initial_population": budget.initial_population,
            "mutations_per_round": budget.mutations_per_round,
            "rng_seed": budget.rng_seed,
        },
        "objective_kind": expected,
        "latency_model": latency.to_dict(),
        "max_consecutive_failures": int(data.get("max_consecutive_failures", 10)),
    }
    evaluators = _evaluators(dict(data.get("evaluator", {})), base_dir, resolved)
    common = dict(
        latency_model=latency,
        deterministic=args.deterministic or bool(data.get("deterministic", False)),
        max_consecutive_failures=resolved["max_consecutive_failures"],
    )
    if args.journal:
        jpath = Path(args.journal)
    else:
        jdir = journal_dir(data.get("journal_dir"))
        jpath = jdir / f"stage_{args.stage}.jsonl"
    if args.stage == "one":
        resolved["pruning"] = False
        make = lambda: build_stage_one(space, evaluators, budget, jpath, config=resolved, **common)
    else:
        seed_cfg = _seed_config(args, data, base_dir)
        resolved["pruning"] = pruning
        resolved["seed_config"] = seed_cfg.to_dict()
        make = lambda: build_stage_two(
            seed_cfg, evaluators, budget, jpath, space=space, pruning=pruning, config=resolved, **common
        )
    return make, jpath, evaluators


def cmd_search(args) -> int:
    make, jpath, evaluators = build_from_config(args)
    has_content = jpath.exists() and jpath.stat().st_size > 0
    if has_content and not (args.resume or args.force):
        raise ConfigError(f"journal {jpath} already exists; pass --resume to continue or --force to overwrite")
    jpath.parent.mkdir(parents=True, exist_ok=True)
    if has_content and args.force and not args.resume:
        jpath.unlink()
    try:
        coord = make()
        if args.resume:
            archive = resume(coord, jpath)
        else:
            coord.start()
            archive = coord.run()
    finally:
        for ev in evaluators:
            ev.close()
    front_path = Path(args.front_out) if args.front_out else jpath.with_suffix(".front.csv")
    fmt = "json" if front_path.suffix == ".json" else "csv"
    rows = front_rows(archive)
    front_path.write_text(render_front(rows, fmt), encoding="utf-8", newline="")
    statuses = [r.status for r in coord.records.values()]
    _emit(
        {
            "stage": args.stage,
            "journal": str(jpath),
            "front_file": str(front_path),
            "evaluations": statuses.count(OK) + statuses.count("failed"),
            "pruned": statuses.count(PRUNED),
            "front": rows,
        }
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# select / analyze / export


def _journal_state(path: str):
    entries = read_journal(path)
    state = replay_entries(entries)
    if not state.records:
        raise ConfigError(f"journal {path} holds no records")
    return state


def _kind_of(state) -> str:
    for r in state.records.values():
        if r.objective is not None:
            return r.objective.kind
    raise ConfigError("journal holds no completed evaluations")


def cmd_select(args) -> int:
    state = _journal_state(args.journal)
    archive = state.archive(_kind_of(state))
    recs = select_records(archive, args.k)
    _emit([{"id": r.id, "cost": r.objective.cost, "accuracy": r.objective.accuracy, "config": r.payload.to_dict()} for r in recs])
    return EXIT_OK


def cmd_analyze(args) -> int:
    recs = journal_records(args.journal, args.stage)
    if not recs:
        raise ConfigError(f"journal {args.journal} holds no records")
    table = factor_table(recs)
    if not table:
        raise ConfigError(f"journal {args.journal} holds no completed stage-two records; factors are backbone properties")
    if args.front is not None:
        ok = [r for r in recs if r.status == OK and r.objective is not None]
        fronts = nondominated_sort(ok)
        if args.front >= len(fronts):
            raise ConfigError(f"journal has {len(fronts)} fronts")
        table = factor_table(fronts[args.front])
    matrix = correlation_matrix(table)
    text = matrix.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export(args) -> int:
    state = _journal_state(args.journal)
    archive = state.archive(_kind_of(state))
    text = render_front(front_rows(archive, args.all), args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smnas", description="Two-stage structural/modular detection NAS engine.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check an encoding or structural config")
    g = v.add_mutually_exclusive_group(required=True)
    g.add_argument("--encoding")
    g.add_argument("--config", help="YAML/JSON structural config")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("cost", help="analytical FLOPs/params/MAC/latency")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--backbone", help=f"one of {', '.join(sorted(NAMED_ENCODINGS))}")
    g.add_argument("--encoding")
    g.add_argument("--config", help="YAML/JSON structural config (full pipeline cost)")
    c.add_argument("--resolution", help="WxH, default 224x224 for backbones")
    c.add_argument("--no-classifier", action="store_true", help="drop the ImageNet classifier from backbone costs")
    c.add_argument("--latency-model", help="latency model JSON")
    c.set_defaults(func=cmd_cost)

    s = sub.add_parser("search", help="run stage one or stage two")
    s.add_argument("stage", choices=("one", "two"))
    s.add_argument("--config", help="run config (YAML/JSON)")
    s.add_argument("--journal", help="journal path (default: $SMNAS_JOURNAL_DIR or journal_dir/stage_<n>.jsonl)")
    s.add_argument("--resume", action="store_true", help="continue an interrupted journal")
    s.add_argument("--force", action="store_true", help="overwrite an existing journal")
    s.add_argument("--deterministic", action="store_true", help="sequential evaluation and logical timestamps")
    s.add_argument("--seed", type=int, help="rng seed (overrides config)")
    s.add_argument("--max-evaluations", type=int)
    s.add_argument("--no-pruning", action="store_true", help="disable partial order pruning (stage two)")
    s.add_argument("--seed-config", help="stage-two seed structure file")
    s.add_argument("--seed-journal", help="stage-one journal to pick the seed from")
    s.add_argument("--seed-index", type=int, default=0, help="which selected candidate to seed from")
    s.add_argument("--k", type=int, default=6, help="selection size used with --seed-journal")
    s.add_argument("--front-out", help="front export path (.csv or .json)")
    s.set_defaults(func=cmd_search)

    sel = sub.add_parser("select", help="pick k seeds from a journal's front")
    sel.add_argument("--journal", required=True)
    sel.add_argument("--k", type=int, default=6)
    sel.set_defaults(func=cmd_select)

    a = sub.add_parser("analyze", help="factor correlation matrix as CSV")
    a.add_argument("--journal", required=True)
    a.add_argument("--stage", help="only records of this stage")
    a.add_argument("--front", type=int, help="only records on this nondominated rank")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("export", help="write the journal's front as CSV or JSON")
    e.add_argument("--journal", required=True)
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    e.add_argument("--all", action="store_true", help="include dominated records with their rank")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (EvaluatorLaunchError, EvaluatorAbort, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except JournalCorruptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ConfigMismatchError, EncodingError, AnalysisError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
