"""Round-based search execution over an evaluator pool, with an append-only journal.

One coordinator owns the archive, the journal and the random generator.
Evaluations run concurrently on a pool of evaluator handles, one request per
handle; results are applied to the archive one at a time as they arrive.

Journal layout (``.jsonl``, one entry per line)::

    {"entry_type": "config_snapshot", "config": {...}, "config_hash": "..."}
    {"entry_type": "stage_marker", "event": "round_start", "round": r,
     "rng_state": {...}, "next_id": n}
    {"entry_type": "record", "record": {...}}        # pending / pruned
    {"entry_type": "stage_marker", "event": "round_committed", "round": r,
     "rng_state": {...}}
    {"entry_type": "record", "record": {...}}        # ok / failed
    {"entry_type": "stage_marker", "event": "finished", "reason": "..."}

Records are upserts keyed by ``id``. A round whose ``round_committed``
marker never made it to disk is discarded on replay and regenerated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections.abc import Iterable
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .costs import CostProfile
from .evaluators import EvalRequest, EvalResponse, EvaluatorLaunchError, TrainSpec
from .pareto import ObjectivePoint, ParetoArchive, should_prune
from .space import ModularCandidate, StructuralConfig

log = logging.getLogger(__name__)

PENDING, OK, FAILED, PRUNED = "pending", "ok", "failed", "pruned"
JOURNAL_DIR_ENV = "SMNAS_JOURNAL_DIR"


class JournalCorruptError(RuntimeError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: corrupt journal entry ({reason})")


class ConfigMismatchError(RuntimeError):
    pass


class EvaluatorAbort(RuntimeError):
    """Too many consecutive evaluation failures."""


# --------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class EvalRecord:
    id: str
    payload: StructuralConfig | ModularCandidate
    stage: str = "one"
    parent_id: str | None = None
    mutation: str = ""
    cost: CostProfile | None = None
    objective: ObjectivePoint | None = None
    source: str | None = None
    status: str = PENDING
    created: float | int | None = None
    completed: float | int | None = None
    eval_seconds: float | None = None
    measured_latency_ms: float | None = None
    message: str | None = None

    @property
    def key(self) -> str:
        return self.payload.key

    @property
    def kind(self) -> str:
        return "modular" if isinstance(self.payload, ModularCandidate) else "structural"

    def to_dict(self) -> dict:
        obj = None
        if self.objective is not None:
            obj = {"cost": self.objective.cost, "accuracy": self.objective.accuracy, "kind": self.objective.kind}
        return {
            "id": self.id,
            "stage": self.stage,
            "parent_id": self.parent_id,
            "mutation": self.mutation,
            "kind": self.kind,
            "payload": self.payload.to_dict(),
            "cost": None if self.cost is None else self.cost.to_dict(),
            "objective": obj,
            "source": self.source,
            "status": self.status,
            "created": self.created,
            "completed": self.completed,
            "eval_seconds": self.eval_seconds,
            "measured_latency_ms": self.measured_latency_ms,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalRecord:
        payload_cls = ModularCandidate if d["kind"] == "modular" else StructuralConfig
        obj = d.get("objective")
        return cls(
            id=d["id"],
            payload=payload_cls.from_dict(d["payload"]),
            stage=d.get("stage", "one"),
            parent_id=d.get("parent_id"),
            mutation=d.get("mutation", ""),
            cost=None if d.get("cost") is None else CostProfile.from_dict(d["cost"]),
            objective=None if obj is None else ObjectivePoint(obj["cost"], obj["accuracy"], obj["kind"]),
            source=d.get("source"),
            status=d["status"],
            created=d.get("created"),
            completed=d.get("completed"),
            eval_seconds=d.get("eval_seconds"),
            measured_latency_ms=d.get("measured_latency_ms"),
            message=d.get("message"),
        )


# --------------------------------------------------------------------------
# Journal


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


class Journal:
    """Append-only JSON-lines file; every append is flushed and fsynced."""

    def __init__(self, path: str | Path, fsync: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def append(self, entry: dict):
        self.append_many([entry])

    def append_many(self, entries: Iterable[dict]):
        text = "".join(_canonical(e) + "\n" for e in entries)
        if not text:
            return
        self._fh.write(text)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self):
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_journal(path: str | Path, repair: bool = False) -> list[dict]:
    """Parse a journal.

    A torn final line (no trailing newline, or unparsable last line) is
    dropped with a warning, and with ``repair`` also cut from the file.
    Corruption anywhere else raises :class:`JournalCorruptError`.
    """
    path = Path(path)
    if not path.exists():
        return []
    data = path.read_bytes()
    lines = data.split(b"\n")
    # data ending in "\n" leaves an empty last element
    tail = lines.pop()
    entries = []
    good_bytes = 0
    for i, raw in enumerate(lines, start=1):
        try:
            entry = json.loads(raw.decode("utf-8"))
            if not isinstance(entry, dict) or "entry_type" not in entry:
                raise ValueError("not a journal entry")
        except ValueError as exc:
            if i == len(lines) and not tail:
                tail = raw
                break
            raise JournalCorruptError(path, i, str(exc)) from None
        entries.append(entry)
        good_bytes += len(raw) + 1
    if tail:
        log.warning("%s: dropping torn final line (%d bytes)", path, len(tail))
        if repair:
            with open(path, "r+b") as fh:
                fh.truncate(good_bytes)
    return entries


def journal_append(journal: Journal, entry: dict):
    journal.append(entry)


@dataclass
class ReplayState:
    config: dict | None = None
    config_hash: str | None = None
    records: dict[str, EvalRecord] = field(default_factory=dict)
    rng_state: dict | None = None
    next_id: int = 0
    round: int = 0
    # ``committed``: the last round finished generation. ``open``: it did not
    # and must be regenerated from ``rng_state``.
    round_status: str = "none"
    finished: bool = False
    finish_reason: str | None = None
    entries: int = 0

    def archive(self, kind: str | None = None) -> ParetoArchive:
        oks = [r for r in self.records.values() if r.status == OK]
        if kind is None:
            kind = oks[0].objective.kind if oks else (self.config or {}).get("objective_kind", "latency_ms")
        archive = ParetoArchive(kind)
        for rec in sorted(oks, key=lambda r: _id_order(r.id)):
            archive.insert(rec)
        return archive

    def evaluated(self) -> list[tuple[object, float]]:
        return [
            (r.payload, r.objective.accuracy)
            for r in sorted(self.records.values(), key=lambda r: _id_order(r.id))
            if r.status == OK
        ]


def _id_order(rid: str):
    head, _, num = rid.rpartition("-")
    return (head, int(num)) if num.isdigit() else (rid, -1)


def replay_entries(entries: list[dict]) -> ReplayState:
    state = ReplayState(entries=len(entries))
    open_round: list[EvalRecord] | None = None
    for e in entries:
        kind = e["entry_type"]
        if kind == "config_snapshot":
            state.config = e["config"]
            state.config_hash = e.get("config_hash")
        elif kind == "record":
            rec = EvalRecord.from_dict(e["record"])
            if open_round is not None:
                open_round.append(rec)
            else:
                state.records[rec.id] = rec
        elif kind == "stage_marker":
            event = e.get("event")
            if event == "round_start":
                # A previous start without commit is superseded here.
                open_round = []
                state.round = e["round"]
                state.rng_state = e["rng_state"]
                state.next_id = e["next_id"]
                state.round_status = "open"
            elif event == "round_committed":
                for rec in open_round or ():
                    state.records[rec.id] = rec
                open_round = None
                state.round = e["round"]
                state.rng_state = e["rng_state"]
                state.next_id = e["next_id"]
                state.round_status = "committed"
            elif event == "finished":
                state.finished = True
                state.finish_reason = e.get("reason")
    return state


def journal_replay(path: str | Path):
    """Rebuild ``(archive, evaluated, rng_state)`` from a journal file."""
    state = replay_entries(read_journal(path))
    return state.archive(), state.evaluated(), state.rng_state


# --------------------------------------------------------------------------
# Search problems


class SearchProblem(Protocol):
    """What the coordinator needs from a stage."""

    stage: str
    objective_kind: str
    prunable: bool

    def initial(self, rng: np.random.Generator, n: int) -> list[tuple[object, str]]: ...

    def mutate(self, payload, rng: np.random.Generator) -> tuple[object, str]: ...

    def random(self, rng: np.random.Generator) -> tuple[object, str]: ...

    def enumerate(self) -> Iterable | None: ...

    def cost(self, payload) -> CostProfile: ...

    def objective_cost(self, payload, cost: CostProfile, response: EvalResponse | None) -> float: ...



class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Budget:
    max_evaluations: int
    initial_population: int = 8
    mutations_per_round: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_evaluations < 0 or self.initial_population <= 0 or self.mutations_per_round <= 0:
            raise ValueError("budget counts must be positive")


class _LogicalClock:
    def __init__(self, start: int = 0):
        self.t = start

    def __call__(self) -> int:
        self.t += 1
        return self.t


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


class Coordinator:
    """Runs search rounds for one stage.

    ``deterministic`` turns on sequential evaluation and logical
    timestamps so that two runs with the same seed write identical journals.
    """

    novelty_attempts = 50
    enumerate_limit = 100_000

    def __init__(
        self,
        problem: SearchProblem,
        evaluators: list,
        budget: Budget,
        journal: Journal | str | Path | None = None,
        *,
        config: dict | None = None,
        pruning: bool = False,
        deterministic: bool = True,
        max_consecutive_failures: int = 10,
        train: TrainSpec | None = None,
        eval_seed: int = 0,
    ):
        if not evaluators:
            raise ValueError("evaluator pool must hold at least one evaluator")
        self.problem = problem
        self.evaluators = list(evaluators)
        self.budget = budget
        self.pruning = pruning and problem.prunable
        self.deterministic = deterministic
        self.max_consecutive_failures = max_consecutive_failures
        self.train = train
        self.eval_seed = eval_seed
        self.config = config if config is not None else {}
        self.config_digest = config_hash(self.config)
        if journal is None or isinstance(journal, Journal):
            self.journal = journal
        else:
            self.journal = Journal(journal)
        self.archive = ParetoArchive(problem.objective_kind)
        self.records: dict[str, EvalRecord] = {}
        self.seen: set[str] = set()
        self.evaluated: list[tuple[object, float]] = []
        self.rng = np.random.default_rng(budget.rng_seed)
        self.round = 0
        self.next_id = 0
        self.consecutive_failures = 0
        self.finished = False
        self._clock = _LogicalClock() if deterministic else time.time
        self._enum_cache: list | None = None
        self._enum_pos = 0

    # ---------------------------------------------------------------- state

    @property
    def evaluations_spent(self) -> int:
        return sum(1 for r in self.records.values() if r.status in (OK, FAILED))

    @property
    def remaining(self) -> int:
        return self.budget.max_evaluations - sum(
            1 for r in self.records.values() if r.status in (OK, FAILED, PENDING)
        )

    def _write(self, *entries: dict):
        if self.journal is not None:
            self.journal.append_many(entries)

    def _record_entry(self, rec: EvalRecord) -> dict:
        return {"entry_type": "record", "record": rec.to_dict()}

    def _store(self, rec: EvalRecord):
        self.records[rec.id] = rec
        self.seen.add(rec.key)

    def _new_id(self) -> str:
        rid = f"{self.problem.stage}-{self.next_id:05d}"
        self.next_id += 1
        return rid

    # ----------------------------------------------------------- generation

    def _parents(self) -> list[EvalRecord]:
        return sorted(self.archive.front, key=lambda r: _id_order(r.id))

    def _enumerated_unseen(self):
        if self._enum_cache is None:
            it = self.problem.enumerate()
            if it is None:
                self._enum_cache = []
            else:
                cache = []
                for p in it:
                    cache.append(p)
                    if len(cache) > self.enumerate_limit:
                        cache = []
                        break
                self._enum_cache = cache
        while self._enum_pos < len(self._enum_cache):
            p = self._enum_cache[self._enum_pos]
            self._enum_pos += 1
            if p.key not in self.seen:
                return p
        return None

    def _novel(self) -> tuple[object, str | None, str] | None:
        parents = self._parents()
        if parents:
            for _ in range(self.novelty_attempts):
                parent = parents[int(self.rng.integers(len(parents)))]
                try:
                    child, desc = self.problem.mutate(parent.payload, self.rng)
                except GenerationError:
                    continue
                if child.key not in self.seen:
                    return child, parent.id, desc
        for _ in range(self.novelty_attempts):
            try:
                child, desc = self.problem.random(self.rng)
            except GenerationError:
                break
            if child.key not in self.seen:
                return child, None, desc
        child = self._enumerated_unseen()
        if child is not None:
            return child, None, "enumerated"
        return None

    def _generate(self, n: int) -> list[tuple[object, str | None, str]]:
        out = []
        if self.round == 0:
            for payload, desc in self.problem.initial(self.rng, n):
                if payload.key not in self.seen:
                    self.seen.add(payload.key)
                    out.append((payload, None, desc))
        while len(out) < n:
            found = self._novel()
            if found is None:
                break
            self.seen.add(found[0].key)
            out.append(found)
        return out

    # ------------------------------------------------------------- dispatch

    def _request(self, rec: EvalRecord) -> EvalRequest:
        return EvalRequest.for_payload(rec.id, rec.payload, self.train, self.eval_seed)

    def _evaluate(self, evaluator, rec: EvalRecord) -> tuple[EvalRecord, EvalResponse, float]:
        started = time.perf_counter()
        try:
            resp = evaluator.evaluate(self._request(rec))
        except EvaluatorLaunchError:
            raise
        except Exception as exc:  # evaluator bug: journal it and move on
            resp = EvalResponse.failed(rec.id, "evaluator", f"{type(exc).__name__}: {exc}")
        return rec, resp, time.perf_counter() - started

    def _complete(self, rec: EvalRecord, resp: EvalResponse, seconds: float, source: str):
        done = replace(
            rec,
            source=source,
            completed=self._clock(),
            eval_seconds=None if self.deterministic else round(seconds, 6),
            measured_latency_ms=resp.measured_latency_ms,
            message=resp.message,
        )
        if resp.ok:
            point = ObjectivePoint(self.problem.objective_cost(rec.payload, rec.cost, resp), resp.accuracy, self.archive.kind)
            done = replace(done, status=OK, objective=point)
            self.consecutive_failures = 0
        else:
            done = replace(done, status=FAILED)
            self.consecutive_failures += 1
            log.warning("evaluation %s failed: %s", rec.id, resp.message)
        self._write(self._record_entry(done))
        self._store(done)
        if done.status == OK:
            self.archive.insert(done)
            self.evaluated.append((done.payload, resp.accuracy))
        if self.consecutive_failures >= self.max_consecutive_failures:
            raise EvaluatorAbort(f"{self.consecutive_failures} consecutive evaluation failures")

    def _dispatch(self, pending: list[EvalRecord]):
        if not pending:
            return
        if len(self.evaluators) == 1:
            ev = self.evaluators[0]
            for rec in pending:
                self._complete(*self._evaluate(ev, rec), getattr(ev, "source", "external"))
            return
        queue = list(pending)
        free = list(self.evaluators)
        with ThreadPoolExecutor(max_workers=len(self.evaluators)) as pool:
            running = {}
            while queue or running:
                while queue and free:
                    ev = free.pop(0)
                    running[pool.submit(self._evaluate, ev, queue.pop(0))] = ev
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in done:
                    ev = running.pop(fut)
                    free.append(ev)
                    self._complete(*fut.result(), getattr(ev, "source", "external"))

    # ---------------------------------------------------------------- rounds

    def run_round(self) -> bool:
        """Generate, prune, evaluate and archive one round.

        Returns False once the budget or the space is exhausted.
        """
        if self.remaining <= 0:
            return False
        size = self.budget.initial_population if self.round == 0 else self.budget.mutations_per_round
        size = min(size, self.remaining)
        rng_before = _rng_state(self.rng)
        id_before = self.next_id
        proposals = self._generate(size)
        if not proposals:
            return False
        new_records = []
        for payload, parent_id, desc in proposals:
            cost = self.problem.cost(payload)
            rec = EvalRecord(
                id=self._new_id(),
                payload=payload,
                stage=self.problem.stage,
                parent_id=parent_id,
                mutation=desc,
                cost=cost,
                created=self._clock(),
            )
            if self.pruning and should_prune(
                payload, self.problem.objective_cost(payload, cost, None), self.archive, self.evaluated
            ):
                rec = replace(rec, status=PRUNED, completed=rec.created, eval_seconds=0.0)
            new_records.append(rec)
        # One write per round so a crash leaves either the whole round or a torn tail.
        self._write(
            {
                "entry_type": "stage_marker",
                "event": "round_start",
                "stage": self.problem.stage,
                "round": self.round,
                "rng_state": rng_before,
                "next_id": id_before,
            },
            *(self._record_entry(r) for r in new_records),
            {
                "entry_type": "stage_marker",
                "event": "round_committed",
                "stage": self.problem.stage,
                "round": self.round,
                "rng_state": _rng_state(self.rng),
                "next_id": self.next_id,
            },
        )
        for rec in new_records:
            self._store(rec)
        self.round += 1
        self._dispatch([r for r in new_records if r.status == PENDING])
        return True

    def start(self):
        self._write(
            {"entry_type": "config_snapshot", "config": self.config, "config_hash": self.config_digest}
        )

    def run(self) -> ParetoArchive:
        try:
            while self.run_round():
                pass
            reason = "budget" if self.remaining <= 0 else "exhausted"
            self._write({"entry_type": "stage_marker", "event": "finished", "stage": self.problem.stage, "reason": reason})
            self.finished = True
        finally:
            if self.journal is not None:
                self.journal.close()
        return self.archive

    # ---------------------------------------------------------------- resume

    def restore(self, state: ReplayState):
        """Adopt replayed journal state; pending records are re-dispatched by :meth:`resume_run`."""
        if state.config_hash is not None and state.config_hash != self.config_digest:
            raise ConfigMismatchError(
                "journal was written with a different configuration: " + _diff(state.config or {}, self.config)
            )
        for rec in sorted(state.records.values(), key=lambda r: _id_order(r.id)):
            self._store(rec)
            if rec.status == OK:
                self.archive.insert(rec)
                self.evaluated.append((rec.payload, rec.objective.accuracy))
        if state.rng_state is not None:
            self.rng = _rng_from_state(state.rng_state)
        self.next_id = state.next_id
        self.round = state.round + 1 if state.round_status == "committed" else state.round
        self.finished = state.finished
        if self.deterministic:
            stamps = [r.completed or r.created or 0 for r in self.records.values()]
            self._clock = _LogicalClock(max(stamps, default=0))
        trailing = 0
        for rec in sorted(self.records.values(), key=lambda r: (r.completed or 0)):
            if rec.status == FAILED:
                trailing += 1
            elif rec.status == OK:
                trailing = 0
        self.consecutive_failures = trailing

    def resume_run(self) -> ParetoArchive:
        if self.finished:
            if self.journal is not None:
                self.journal.close()
            return self.archive
        pending = sorted((r for r in self.records.values() if r.status == PENDING), key=lambda r: _id_order(r.id))
        try:
            self._dispatch(pending)
        except BaseException:
            if self.journal is not None:
                self.journal.close()
            raise
        return self.run()


def _diff(old: dict, new: dict, prefix: str = "") -> str:
    parts = []
    for k in sorted(set(old) | set(new)):
        a, b = old.get(k), new.get(k)
        if a == b:
            continue
        if isinstance(a, dict) and isinstance(b, dict):
            parts.append(_diff(a, b, f"{prefix}{k}."))
        else:
            parts.append(f"{prefix}{k}: {a!r} -> {b!r}")
    return "; ".join(p for p in parts if p)


def resume(coordinator: Coordinator, journal_path: str | Path) -> ParetoArchive:
    """Continue the run recorded in ``journal_path`` with ``coordinator``.

    The coordinator must be built from the same configuration; its journal
    should append to the same file.
    """
    entries = read_journal(journal_path, repair=True)
    if not entries:
        coordinator.start()
        return coordinator.run()
    coordinator.restore(replay_entries(entries))
    return coordinator.resume_run()


def journal_dir(default: str | Path | None = None) -> Path:
    env = os.environ.get(JOURNAL_DIR_ENV)
    if env:
        return Path(env)
    return Path(default) if default is not None else Path("journals")
