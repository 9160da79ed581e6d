"""The online generation loop: select, fill, dispatch, check, update, repeat.

Requests are generated one after another as an unbounded stream; the loop
stops when the wall-clock budget expires (verdict ``passed``), when the first
error-grade finding appears under ``stop_on_error`` (verdict ``failed``), or
when an optional request cap is hit (stop reason ``operator-stop``).  The
first few selections are biased toward creating prerequisite resources in
dependency order so the state store populates quickly; after that, selection
is purely weight-driven.

Sequential mode keeps at most one request in flight and is deterministic for
a fixed seed against a deterministic SUT.  Concurrent mode keeps up to
``max_in_flight`` exchanges open, samples and predicts against a consistent
state snapshot taken at generation time, and applies effects in completion
order.
"""

from __future__ import annotations

import json
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any, Callable
from urllib.parse import quote, urlencode

from .checker import (
    GRADE_ERROR,
    GRADE_WARNING,
    CheckPolicy,
    DEFAULT_POLICY,
    Finding,
    check_exchange,
)
from .http_driver import DEFAULT_TIMEOUT, NetworkTarget, execute, probe
from .naming import DEFAULT_MATCH_THRESHOLD
from .sampling import (
    KIND_REFERENCE,
    ParameterSamplerSet,
    SamplingSpec,
    sample_value,
    select_operation,
)
from .semantic_model import OperationBinding, SemanticModel, topological_order
from .spec_ingest import spec_to_jsonable
from .state_tracker import (
    DEFAULT_STORE_CAP,
    IdExtractionFailure,
    StateStore,
    apply_effect,
    predict_status,
)
from .trace_recreate import (
    SinkWriteError,
    TraceSink,
    make_trace_event,
    record,
)
from random import Random


class EndpointUnreachable(Exception):
    """The startup probe got no HTTP answer from the endpoint."""


DEFAULT_WARMUP = 20


@dataclass
class RequestPlan:
    binding: OperationBinding
    method: str
    path_template: str
    concrete_url: str
    headers: dict[str, str]
    body: Any
    value_tags: dict[str, str]
    violated: dict[str, str]
    plan_id: int
    path_param_values: dict[str, Any] = field(default_factory=dict)
    query_values: dict[str, Any] = field(default_factory=dict)
    reference_values: dict[str, tuple[str, tuple[str, ...]]] = field(default_factory=dict)
    target_id_param: str | None = None
    resource_id_fields: tuple[str, ...] = ()
    declared_status_patterns: tuple[str, ...] = ()

    def to_wire_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "operation": self.binding.operation_id,
            "resource": self.binding.resource,
            "crud_kind": self.binding.crud_kind,
            "method": self.method,
            "path_template": self.path_template,
            "concrete_url": self.concrete_url,
            "headers": self.headers,
            "body": self.body,
            "path_params": self.path_param_values,
            "query": self.query_values,
            "value_tags": self.value_tags,
            "violated": self.violated,
            "reference_values": {k: [res, list(ids)]
                                 for k, (res, ids) in self.reference_values.items()},
            "target_id_param": self.target_id_param,
            "resource_id_fields": list(self.resource_id_fields),
            "declared_status_patterns": list(self.declared_status_patterns),
        }

    def wire_bytes(self) -> bytes:
        return json.dumps(self.to_wire_dict(), sort_keys=True).encode("utf-8")


@dataclass
class RunConfig:
    mode: str = "sequential"
    max_in_flight: int = 1
    duration_limit: float | None = None
    stop_on_error: bool = True
    master_seed: int = 0
    endpoint: str | None = None
    max_requests: int | None = None
    request_timeout: float = DEFAULT_TIMEOUT
    n_warmup: int = DEFAULT_WARMUP
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    store_cap: int = DEFAULT_STORE_CAP
    path_excludes: tuple[str, ...] = ("/_admin",)
    trace_body_limit: int = 4096
    progress_interval: float = 5.0

    def __post_init__(self):
        if self.mode not in ("sequential", "concurrent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "sequential":
            self.max_in_flight = 1
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}  # noqa: C416
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run-config keys: {sorted(unknown)}")
        cleaned = dict(data)
        if "path_excludes" in cleaned:
            cleaned["path_excludes"] = tuple(cleaned["path_excludes"])
        return cls(**cleaned)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "max_in_flight": self.max_in_flight,
            "duration_limit": self.duration_limit,
            "stop_on_error": self.stop_on_error,
            "master_seed": self.master_seed, "endpoint": self.endpoint,
            "max_requests": self.max_requests,
            "request_timeout": self.request_timeout,
            "n_warmup": self.n_warmup,
            "match_threshold": self.match_threshold,
            "store_cap": self.store_cap,
            "path_excludes": list(self.path_excludes),
            "trace_body_limit": self.trace_body_limit,
        }


@dataclass
class ProgressEvent:
    requests_sent: int
    elapsed: float
    findings_total: int
    error_findings: int
    requests_per_second: float
    in_flight: int


@dataclass
class RunResult:
    verdict: str  # passed | failed
    stop_reason: str  # timeout | error-detected | operator-stop
    counters: dict[str, Any]
    trace_ref: str | None
    findings: list[Finding] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "stop_reason": self.stop_reason,
            "counters": self.counters,
            "trace_ref": self.trace_ref,
            "findings": [f.to_dict() for f in self.findings],
            "notes": self.notes,
        }


# --- request generation --------------------------------------------------------

def _wire_str(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def generate_request(model: SemanticModel, sampling_spec: SamplingSpec,
                     store, rng: Random, plan_id: int = 1,
                     n_warmup: int = 0,
                     warmup_bindings: list[OperationBinding] | None = None
                     ) -> RequestPlan:
    """Select an operation and fill every parameter into a concrete plan."""
    if warmup_bindings and plan_id <= n_warmup:
        binding = warmup_bindings[(plan_id - 1) % len(warmup_bindings)]
    else:
        binding = select_operation(model, sampling_spec.weights, rng)

    op = model.operation_def(binding)
    sampler_set = sampling_spec.sampler_set(binding.operation_id)

    path_values: dict[str, Any] = {}
    query_values: dict[str, Any] = {}
    header_values: dict[str, str] = {}
    body_fields: dict[str, Any] = {}
    tags: dict[str, str] = {}
    violated: dict[str, str] = {}
    references: dict[str, tuple[str, tuple[str, ...]]] = {}
    target_id_param: str | None = None

    taken: set[str] = set()
    for param in op.parameters:
        key = ParameterSamplerSet.key_for(param, taken)
        taken.add(key)
        domain = sampler_set.per_parameter[key]
        sampled = sample_value(domain, store, rng)
        tags[key] = sampled.tag
        if sampled.violated:
            violated[key] = sampled.violated
        if domain.kind == KIND_REFERENCE:
            ids = sampled.value if isinstance(sampled.value, list) \
                else [sampled.value]
            references[key] = (domain.target_resource,
                               tuple(str(i) for i in ids))
            if param.location == "path" \
                    and domain.target_resource == binding.resource \
                    and target_id_param is None:
                target_id_param = key
        if param.location == "path":
            path_values[param.name] = sampled.value
        elif param.location == "query":
            query_values[param.name] = sampled.value
        elif param.location == "header":
            header_values[param.name] = _wire_str(sampled.value)
        else:
            body_fields[param.name] = sampled.value

    body: Any = None
    if body_fields:
        body = body_fields
    elif "__body__" in sampler_set.per_parameter:
        sampled = sample_value(sampler_set.per_parameter["__body__"], store, rng)
        tags["__body__"] = sampled.tag
        if sampled.violated:
            violated["__body__"] = sampled.violated
        body = sampled.value

    url = op.path_template
    for name, value in path_values.items():
        url = url.replace("{" + name + "}", quote(_wire_str(value), safe=""))
    if query_values:
        encoded = {k: ([_wire_str(x) for x in v] if isinstance(v, list)
                       else _wire_str(v))
                   for k, v in query_values.items()}
        url += "?" + urlencode(encoded, doseq=True)

    resource_id_fields: tuple[str, ...] = ()
    try:
        resource_id_fields = model.resource(binding.resource).id_field_names
    except KeyError:
        pass

    return RequestPlan(
        binding=binding,
        method=op.method,
        path_template=op.path_template,
        concrete_url=url,
        headers=header_values,
        body=body,
        value_tags=tags,
        violated=violated,
        plan_id=plan_id,
        path_param_values={k: _wire_str(v) for k, v in path_values.items()},
        query_values=query_values,
        reference_values=references,
        target_id_param=target_id_param,
        resource_id_fields=resource_id_fields,
        declared_status_patterns=tuple(p for p, _ in op.responses),
    )


# --- run scaffolding --------------------------------------------------------------

def _filtered_model(model: SemanticModel,
                    path_excludes: tuple[str, ...]) -> SemanticModel:
    if not path_excludes:
        return model
    kept = [b for b in model.bindings
            if not any(b.operation_id.split(" ", 1)[1].startswith(prefix)
                       for prefix in path_excludes)]
    if len(kept) == len(model.bindings):
        return model
    return SemanticModel(resources=model.resources, bindings=kept,
                         edges=model.edges, provenance=model.provenance,
                         warnings=model.warnings, spec=model.spec)


def _warmup_bindings(model: SemanticModel) -> list[OperationBinding]:
    """Create operations of prerequisite resources first, in dependency order."""
    order = topological_order(model)
    out: list[OperationBinding] = []
    for name in order:
        for binding in sorted(model.bindings_for_resource(name),
                              key=lambda b: b.operation_id):
            if binding.crud_kind == "create":
                out.append(binding)
                break
    return out


class _RunState:
    def __init__(self, config: RunConfig, model: SemanticModel,
                 sampling_spec: SamplingSpec, target, trace_sink, policy):
        if model.spec is None:
            raise ValueError("model has no attached spec; load it with one")
        self.config = config
        self.model = _filtered_model(model, config.path_excludes)
        if not self.model.bindings:
            raise ValueError("no operations left to fuzz after path excludes")
        self.sampling_spec = sampling_spec
        self.policy = policy or DEFAULT_POLICY
        self.rng = Random(config.master_seed)
        self.store = StateStore(config.store_cap)
        self.warmup = _warmup_bindings(self.model)
        self.ops_by_id = model.spec.operations_by_id()

        if target is None:
            if not config.endpoint:
                raise ValueError("config.endpoint is required without an explicit target")
            target = NetworkTarget(config.endpoint)
        self.target = target
        if not probe(target, min(config.request_timeout, 5.0)):
            raise EndpointUnreachable(
                f"no HTTP answer from {getattr(target, 'base_url', target)!r}")

        self.own_sink = trace_sink is None
        if self.own_sink:
            fd = tempfile.NamedTemporaryFile(
                mode="w", suffix=".trace.jsonl", prefix="apifuzz-",
                delete=False, encoding="utf-8")
            self.sink = TraceSink(fd, fd.name, trace_header(config, model))
        else:
            self.sink = trace_sink

        self.counters: dict[str, Any] = {
            "requests_sent": 0,
            "per_operation": {},
            "findings_total": 0,
            "error_findings": 0,
            "warning_findings": 0,
            "info_findings": 0,
            "peak_in_flight": 0,
            "id_extraction_failures": 0,
        }
        self.findings: list[Finding] = []
        self.notes: list[str] = []
        self.started = time.monotonic()
        self.last_progress = self.started

    def elapsed(self) -> float:
        return time.monotonic() - self.started

    def note_findings(self, findings: list[Finding]) -> None:
        for f in findings:
            self.counters["findings_total"] += 1
            self.counters[f"{f.grade}_findings"] += 1
            if f.grade == GRADE_ERROR or (
                    f.grade == GRADE_WARNING
                    and self.counters["warning_findings"] <= 200):
                self.findings.append(f)

    def apply(self, plan: RequestPlan, result) -> None:
        try:
            apply_effect(plan, result, self.store, self.config.match_threshold)
        except IdExtractionFailure as exc:
            self.counters["id_extraction_failures"] += 1
            if self.counters["id_extraction_failures"] <= 20:
                self.notes.append(
                    f"id extraction failed for {plan.binding.operation_id} "
                    f"(plan {plan.plan_id}): {exc}")

    def emit_progress(self, progress: Callable | None, in_flight: int) -> None:
        if progress is None:
            return
        now = time.monotonic()
        if now - self.last_progress < self.config.progress_interval:
            return
        self.last_progress = now
        elapsed = self.elapsed()
        progress(ProgressEvent(
            requests_sent=self.counters["requests_sent"],
            elapsed=elapsed,
            findings_total=self.counters["findings_total"],
            error_findings=self.counters["error_findings"],
            requests_per_second=(self.counters["requests_sent"] / elapsed
                                 if elapsed > 0 else 0.0),
            in_flight=in_flight))

    def finish(self, stop_reason: str) -> RunResult:
        elapsed = self.elapsed()
        self.counters["duration_seconds"] = round(elapsed, 3)
        self.counters["requests_per_second"] = round(
            self.counters["requests_sent"] / elapsed, 2) if elapsed > 0 else 0.0
        if self.own_sink:
            self.sink.close()
        verdict = "failed" if self.counters["error_findings"] > 0 else "passed"
        return RunResult(verdict=verdict, stop_reason=stop_reason,
                         counters=self.counters, trace_ref=self.sink.path,
                         findings=self.findings, notes=self.notes)


def trace_header(config: RunConfig, model: SemanticModel) -> dict:
    from .semantic_model import serialize_model  # local to avoid import cycle noise
    return {
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config.to_dict(),
        "spec_ir": spec_to_jsonable(model.spec),
        "model": json.loads(serialize_model(model).decode("utf-8")),
    }


def _should_stop(state: _RunState, dispatched: int) -> str | None:
    config = state.config
    if config.duration_limit is not None and state.elapsed() >= config.duration_limit:
        return "timeout"
    if config.max_requests is not None and dispatched >= config.max_requests:
        return "operator-stop"
    return None


# --- the two run modes ---------------------------------------------------------------

def run_sequential(config: RunConfig, model: SemanticModel,
                   sampling_spec: SamplingSpec, target=None,
                   trace_sink: TraceSink | None = None,
                   policy: CheckPolicy | None = None,
                   progress: Callable | None = None) -> RunResult:
    """Strict generate -> dispatch -> check -> apply cycle, one in flight."""
    state = _RunState(config, model, sampling_spec, target, trace_sink, policy)
    state.counters["peak_in_flight"] = 1
    stop_reason = None
    try:
        while True:
            stop_reason = _should_stop(state, state.counters["requests_sent"])
            if stop_reason:
                break
            plan_id = state.counters["requests_sent"] + 1
            plan = generate_request(state.model, sampling_spec, state.store,
                                    state.rng, plan_id=plan_id,
                                    n_warmup=config.n_warmup,
                                    warmup_bindings=state.warmup)
            prediction = predict_status(plan, state.store, "sequential")
            dispatch_epoch = state.store.epoch
            result = execute(plan, state.target, config.request_timeout)
            state.counters["requests_sent"] += 1
            per_op = state.counters["per_operation"]
            per_op[plan.binding.operation_id] = \
                per_op.get(plan.binding.operation_id, 0) + 1

            op = state.ops_by_id[plan.binding.operation_id]
            findings = check_exchange(plan, result, op, prediction,
                                      state.policy, exchange_ref=plan_id)
            state.note_findings(findings)
            state.apply(plan, result)
            event = make_trace_event(
                plan_id, plan.to_wire_dict(), result, findings, prediction,
                dispatch_epoch=dispatch_epoch,
                completion_epoch=state.store.epoch,
                body_limit=config.trace_body_limit)
            try:
                record(event, state.sink)
            except SinkWriteError as exc:
                state.notes.append(f"trace sink failed: {exc}")
                stop_reason = "operator-stop"
                break
            state.emit_progress(progress, in_flight=1)
            if config.stop_on_error and any(f.grade == GRADE_ERROR
                                            for f in findings):
                stop_reason = "error-detected"
                break
    finally:
        if stop_reason is None:
            stop_reason = "operator-stop"
    return state.finish(stop_reason)


def run_concurrent(config: RunConfig, model: SemanticModel,
                   sampling_spec: SamplingSpec, target=None,
                   trace_sink: TraceSink | None = None,
                   policy: CheckPolicy | None = None,
                   progress: Callable | None = None) -> RunResult:
    """Up to ``max_in_flight`` exchanges open; effects in completion order.

    With ``max_in_flight == 1`` this degenerates to the sequential behavior,
    including exact-state predictions.
    """
    state = _RunState(config, model, sampling_spec, target, trace_sink, policy)
    window = max(config.max_in_flight, 1)
    predict_mode = "concurrent" if window > 1 else "sequential"
    executor = ThreadPoolExecutor(max_workers=window,
                                  thread_name_prefix="apifuzz-worker")
    in_flight: dict[Any, tuple[RequestPlan, Any, int]] = {}
    dispatched = 0
    event_counter = 0
    stop_reason: str | None = None
    try:
        while True:
            if stop_reason is None:
                stop_reason_candidate = _should_stop(state, dispatched)
                if stop_reason_candidate:
                    stop_reason = stop_reason_candidate
            while stop_reason is None and len(in_flight) < window:
                dispatched += 1
                snapshot = state.store.snapshot()
                plan = generate_request(state.model, sampling_spec, snapshot,
                                        state.rng, plan_id=dispatched,
                                        n_warmup=config.n_warmup,
                                        warmup_bindings=state.warmup)
                prediction = predict_status(plan, snapshot, predict_mode)
                future = executor.submit(execute, plan, state.target,
                                         config.request_timeout)
                in_flight[future] = (plan, prediction, snapshot.epoch)
                state.counters["peak_in_flight"] = max(
                    state.counters["peak_in_flight"], len(in_flight))
                candidate = _should_stop(state, dispatched)
                if candidate:
                    stop_reason = candidate
                    break
            if not in_flight:
                if stop_reason is not None:
                    break
                continue
            done, _ = wait(set(in_flight), timeout=0.25,
                           return_when=FIRST_COMPLETED)
            for future in done:
                plan, prediction, dispatch_epoch = in_flight.pop(future)
                result = future.result()
                state.counters["requests_sent"] += 1
                per_op = state.counters["per_operation"]
                per_op[plan.binding.operation_id] = \
                    per_op.get(plan.binding.operation_id, 0) + 1
                event_counter += 1
                op = state.ops_by_id[plan.binding.operation_id]
                findings = check_exchange(plan, result, op, prediction,
                                          state.policy,
                                          exchange_ref=event_counter)
                state.note_findings(findings)
                state.apply(plan, result)
                event = make_trace_event(
                    event_counter, plan.to_wire_dict(), result, findings,
                    prediction, dispatch_epoch=dispatch_epoch,
                    completion_epoch=state.store.epoch,
                    body_limit=config.trace_body_limit)
                try:
                    record(event, state.sink)
                except SinkWriteError as exc:
                    state.notes.append(f"trace sink failed: {exc}")
                    stop_reason = "operator-stop"
                if config.stop_on_error and any(f.grade == GRADE_ERROR
                                                for f in findings):
                    stop_reason = "error-detected"
            state.emit_progress(progress, in_flight=len(in_flight))
    finally:
        executor.shutdown(wait=True)
        if stop_reason is None:
            stop_reason = "operator-stop"
    return state.finish(stop_reason)
