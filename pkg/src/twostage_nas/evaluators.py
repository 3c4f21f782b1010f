"""Accuracy evaluators.

Two implementations share one interface, ``evaluate(request) -> EvalResponse``:

* :class:`SurrogateEvaluator`, a deterministic closed-form stand-in for
  proxy training, used for desk-scale runs and tests;
* :class:`ExternalEvaluator`, which drives a trainer process over
  newline-delimited JSON on its stdin/stdout.

Wire format, one UTF-8 JSON object per line::

    request:  {"id", "kind", "payload", "resolution", "train", "seed"}
    response: {"id", "status", "accuracy", "measured_latency_ms", "message"}

Unknown response fields are ignored.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import random
import subprocess
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .space import (
    BackboneEncoding,
    ModularCandidate,
    NeckKind,
    Resolution,
    StructuralConfig,
    named_encoding,
)

STRUCTURAL = "structural"
MODULAR = "modular"
DEFAULT_TIMEOUT_S = 600.0


class WireSchemaError(ValueError):
    """A wire message does not match the schema; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class EvaluatorLaunchError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 5
    lr_max: float = 0.04
    lr_min: float = 0.0001
    lr_schedule: str = "cosine"
    norm: str = "BN"
    batch_per_device: int = 2
    pretrained: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.lr_max <= 0 or self.lr_min < 0 or self.batch_per_device <= 0:
            raise ValueError("train fields must be positive")
        if self.lr_schedule != "cosine":
            raise ValueError(f"unsupported lr schedule {self.lr_schedule!r}")
        if self.norm not in ("BN", "GN", "GN+WS"):
            raise ValueError(f"unsupported norm {self.norm!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr_max": self.lr_max,
            "lr_min": self.lr_min,
            "lr_schedule": self.lr_schedule,
            "norm": self.norm,
            "batch_per_device": self.batch_per_device,
            "pretrained": self.pretrained,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrainSpec:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


STAGE_ONE_TRAIN = TrainSpec()
STAGE_TWO_TRAIN = TrainSpec(epochs=9, lr_max=0.24, norm="GN+WS", batch_per_device=8, pretrained=False)


@dataclass(frozen=True)
class EvalRequest:
    id: str
    kind: str
    payload: StructuralConfig | ModularCandidate
    resolution: Resolution
    train: TrainSpec = STAGE_ONE_TRAIN
    seed: int = 0

    def __post_init__(self):
        expected = MODULAR if isinstance(self.payload, ModularCandidate) else STRUCTURAL
        if self.kind != expected:
            raise ValueError(f"kind {self.kind!r} does not match payload type ({expected})")

    @classmethod
    def for_payload(cls, rid: str, payload, train: TrainSpec | None = None, seed: int = 0) -> EvalRequest:
        if isinstance(payload, ModularCandidate):
            return cls(rid, MODULAR, payload, payload.seed.resolution, train or STAGE_TWO_TRAIN, seed)
        return cls(rid, STRUCTURAL, payload, payload.resolution, train or STAGE_ONE_TRAIN, seed)


@dataclass(frozen=True)
class EvalResponse:
    id: str
    status: str
    accuracy: float | None = None
    measured_latency_ms: float | None = None
    message: str | None = None
    # Not on the wire: why a failed evaluation failed.
    error_kind: str | None = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def failed(cls, rid: str, error_kind: str, message: str) -> EvalResponse:
        return cls(rid, "failed", message=f"{error_kind}: {message}", error_kind=error_kind)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_request(req: EvalRequest) -> str:
    return _dumps(
        {
            "id": req.id,
            "kind": req.kind,
            "payload": req.payload.to_dict(),
            "resolution": str(req.resolution),
            "train": req.train.to_dict(),
            "seed": req.seed,
        }
    )


def _field(obj: dict, name: str, types, required: bool = True):
    value = obj.get(name)
    if value is None:
        if required:
            raise WireSchemaError(f"$.{name}", "missing")
        return None
    if isinstance(value, bool) or not isinstance(value, types):
        raise WireSchemaError(f"$.{name}", f"unexpected type {type(value).__name__}")
    return value


def _load_object(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireSchemaError("$", f"not valid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise WireSchemaError("$", "expected a JSON object")
    return obj


_TRAIN_TYPES = {
    "epochs": int,
    "lr_max": (int, float),
    "lr_min": (int, float),
    "lr_schedule": str,
    "norm": str,
    "batch_per_device": int,
    "pretrained": bool,
}


def decode_request(line: str) -> EvalRequest:
    obj = _load_object(line)
    rid = _field(obj, "id", str)
    kind = _field(obj, "kind", str)
    payload = _field(obj, "payload", dict)
    res = _field(obj, "resolution", str)
    train = _field(obj, "train", dict)
    seed = _field(obj, "seed", int)
    try:
        if kind == MODULAR:
            body = ModularCandidate.from_dict(payload)
        elif kind == STRUCTURAL:
            body = StructuralConfig.from_dict(payload)
        else:
            raise WireSchemaError("$.kind", f"unknown kind {kind!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, WireSchemaError):
            raise
        raise WireSchemaError("$.payload", str(exc)) from None
    try:
        resolution = Resolution.parse(res)
    except ValueError as exc:
        raise WireSchemaError("$.resolution", str(exc)) from None
    fields = {}
    for name, types in _TRAIN_TYPES.items():
        value = train.get(name)
        if value is None:
            raise WireSchemaError(f"$.train.{name}", "missing")
        if isinstance(value, bool) != (types is bool) or not isinstance(value, types):
            raise WireSchemaError(f"$.train.{name}", f"unexpected type {type(value).__name__}")
        fields[name] = value
    try:
        spec = TrainSpec(**fields)
    except ValueError as exc:
        raise WireSchemaError("$.train", str(exc)) from None
    return EvalRequest(rid, kind, body, resolution, spec, seed)


def encode_response(resp: EvalResponse) -> str:
    return _dumps(
        {
            "id": resp.id,
            "status": resp.status,
            "accuracy": resp.accuracy,
            "measured_latency_ms": resp.measured_latency_ms,
            "message": resp.message,
        }
    )


def decode_response(line: str) -> EvalResponse:
    obj = _load_object(line)
    rid = _field(obj, "id", str)
    status = _field(obj, "status", str)
    if status not in ("ok", "failed"):
        raise WireSchemaError("$.status", f"expected 'ok' or 'failed', got {status!r}")
    accuracy = _field(obj, "accuracy", (int, float), required=status == "ok")
    if status == "ok":
        if accuracy is None:
            raise WireSchemaError("$.accuracy", "required when status is ok")
        if not (math.isfinite(accuracy) and 0.0 <= accuracy <= 100.0):
            raise WireSchemaError("$.accuracy", f"{accuracy} outside [0, 100]")
    latency = _field(obj, "measured_latency_ms", (int, float), required=False)
    if latency is not None and not (math.isfinite(latency) and latency >= 0):
        raise WireSchemaError("$.measured_latency_ms", "must be a non-negative number")
    message = _field(obj, "message", str, required=False)
    return EvalResponse(
        rid,
        status,
        None if accuracy is None else float(accuracy),
        None if latency is None else float(latency),
        message,
    )


# --------------------------------------------------------------------------
# Surrogate


@dataclass(frozen=True)
class SurrogateProfile:
    """Coefficients of the synthetic accuracy function.

    ``resolution_gain`` maps ``"WxH"`` to an additive gain; resolutions not
    in the table are interpolated linearly in pixel count and clamped at the
    ends. ``module_bonus`` keys are ``neck.<kind>``, ``rpn.<kind>``,
    ``head.<kind>``, ``head.cascade_extra_stage`` and ``fpn.<channels>``.
    """

    a_max: float = 40.0
    k_cap: float = 0.01
    resolution_gain: dict = field(default_factory=dict)
    module_bonus: dict = field(default_factory=dict)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.a_max <= 100:
            raise ValueError("a_max must be in (0, 100]")
        if self.k_cap <= 0 or self.noise_sigma < 0:
            raise ValueError("k_cap must be positive and noise_sigma non-negative")
        if any(not math.isfinite(v) for v in self.module_bonus.values()):
            raise ValueError("module bonuses must be finite")
        table = self._gain_table()
        if any(b[1] < a[1] for a, b in zip(table, table[1:])):
            raise ValueError("resolution gains must not decrease with pixel count")

    def _gain_table(self) -> list[tuple[int, float]]:
        return sorted((Resolution.parse(k).pixels, float(v)) for k, v in self.resolution_gain.items())

    def gain(self, resolution: Resolution) -> float:
        table = self._gain_table()
        if not table:
            return 0.0
        px = resolution.pixels
        if px <= table[0][0]:
            return table[0][1]
        for (p0, g0), (p1, g1) in zip(table, table[1:]):
            if px <= p1:
                return g0 + (g1 - g0) * (px - p0) / (p1 - p0)
        return table[-1][1]

    @classmethod
    def from_dict(cls, data: dict) -> SurrogateProfile:
        return cls(
            float(data.get("a_max", cls.a_max)),
            float(data.get("k_cap", cls.k_cap)),
            dict(data.get("resolution_gain", {})),
            dict(data.get("module_bonus", {})),
            float(data.get("noise_sigma", 0.0)),
            int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> SurrogateProfile:
        if path is None:
            text = resources.files("twostage_nas.data").joinpath("surrogate_profile.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "a_max": self.a_max,
            "k_cap": self.k_cap,
            "resolution_gain": dict(self.resolution_gain),
            "module_bonus": dict(self.module_bonus),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


def default_surrogate_profile() -> SurrogateProfile:
    return SurrogateProfile.load()


def capacity(enc: BackboneEncoding) -> float:
    """Sum over blocks of log2 of the block's output width."""
    mult = 4 if enc.block in ("bottleneck", "xbottleneck") else 1
    return sum(math.log2(w * mult) for w in enc.block_widths())


def _structure(payload) -> tuple[BackboneEncoding, StructuralConfig, int | None]:
    if isinstance(payload, ModularCandidate):
        return payload.encoding, payload.seed, payload.fpn_channels
    bb = payload.backbone
    enc = bb if isinstance(bb, BackboneEncoding) else named_encoding(bb)
    fpn = payload.neck.channels if payload.neck.kind is NeckKind.FPN else None
    return enc, payload, fpn


def synthetic_accuracy(req: EvalRequest, profile: SurrogateProfile) -> EvalResponse:
    enc, structure, fpn = _structure(req.payload)
    bonus = profile.module_bonus
    acc = profile.a_max * (1.0 - math.exp(-profile.k_cap * capacity(enc)))
    acc += profile.gain(req.resolution)
    acc += bonus.get(f"neck.{structure.neck.kind.value}", 0.0)
    acc += bonus.get(f"rpn.{structure.rpn.value}", 0.0)
    acc += bonus.get(f"head.{structure.head.kind.value}", 0.0)
    acc += bonus.get("head.cascade_extra_stage", 0.0) * (structure.head.stages - 1)
    if fpn is not None:
        acc += bonus.get(f"fpn.{fpn}", 0.0)
    if profile.noise_sigma > 0:
        token = f"{req.payload.key}|{req.resolution}|{profile.seed}|{req.seed}"
        digest = hashlib.sha256(token.encode()).digest()
        acc += random.Random(int.from_bytes(digest[:8], "big")).gauss(0.0, profile.noise_sigma)
    return EvalResponse(req.id, "ok", min(max(acc, 0.0), 100.0))


class SurrogateEvaluator:
    source = "surrogate"

    def __init__(self, profile: SurrogateProfile | None = None):
        self.profile = profile or default_surrogate_profile()
        self.calls = 0

    def evaluate(self, req: EvalRequest) -> EvalResponse:
        self.calls += 1
        return synthetic_accuracy(req, self.profile)

    def close(self):
        pass


# --------------------------------------------------------------------------
# External process


_EOF = object()


class ExternalEvaluator:
    """One child process, one request in flight.

    The process is started lazily and restarted after a crash or timeout.
    Failures come back as ``failed`` responses whose ``error_kind`` is one of
    ``crash``, ``timeout``, ``malformed``, ``id_mismatch`` or ``evaluator``.
    """

    source = "external"

    def __init__(self, command: list[str], timeout: float = DEFAULT_TIMEOUT_S, cwd=None, env=None):
        if not command:
            raise EvaluatorLaunchError("empty evaluator command")
        self.command = list(command)
        self.timeout = timeout
        self.cwd = cwd
        self.env = env
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None

    def start(self):
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
                cwd=self.cwd,
                env=self.env,
            )
        except OSError as exc:
            raise EvaluatorLaunchError(f"cannot launch {self.command[0]!r}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc, lines):
        for line in proc.stdout:
            lines.put(line)
        lines.put(_EOF)

    def _alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def evaluate(self, req: EvalRequest) -> EvalResponse:
        if not self._alive():
            self.close()
            self.start()
        try:
            self._proc.stdin.write(encode_request(req) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            return EvalResponse.failed(req.id, "crash", f"evaluator stdin closed ({exc})")
        deadline = time.monotonic() + self.timeout
        try:
            line = self._lines.get(timeout=max(deadline - time.monotonic(), 0))
        except queue.Empty:
            self.close()
            return EvalResponse.failed(req.id, "timeout", f"no response within {self.timeout:g} s")
        if line is _EOF:
            code = self._proc.wait()
            self.close()
            return EvalResponse.failed(req.id, "crash", f"evaluator exited with code {code}")
        try:
            resp = decode_response(line)
        except WireSchemaError as exc:
            return EvalResponse.failed(req.id, "malformed", str(exc))
        if resp.id != req.id:
            return EvalResponse.failed(req.id, "id_mismatch", f"expected id {req.id!r}, got {resp.id!r}")
        if not resp.ok:
            return replace(resp, error_kind="evaluator")
        return resp

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except OSError:
            pass
        if proc.poll() is None:
            try:
                proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_evaluate(req: EvalRequest, endpoint: ExternalEvaluator) -> EvalResponse:
    return endpoint.evaluate(req)
