"""OpenAPI 3.x ingestion: load, resolve, validate, and lint.

Turns an OpenAPI document (JSON or YAML) into a self-contained intermediate
representation with every ``$ref`` spliced in, so downstream modules never
touch the raw document.  Unsupported schema constructions degrade to the
permissive "any" schema with a warning instead of failing the load; the
warnings surface through :func:`lint_spec` together with the structural lint
rules.

Supported: OpenAPI 3.0 / 3.1, internal references, a pragmatic JSON-schema
subset (types, enum, numeric bounds, string pattern/length, array items and
bounds, object properties/required, allOf merge, single-branch oneOf/anyOf).
Swagger 2.x documents are rejected.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

import yaml

from .naming import DEFAULT_MATCH_THRESHOLD, match_names


class SpecError(Exception):
    """Base class for specification ingestion failures."""


class ParseError(SpecError):
    """The document is not syntactically valid JSON/YAML or not an OpenAPI doc."""


class UnresolvedRef(SpecError):
    """A ``$ref`` points at nothing resolvable inside the document."""


class UnsupportedVersion(SpecError):
    """The document is not OpenAPI 3.x."""


# --- status patterns -------------------------------------------------------

_STATUS_PATTERN_RE = re.compile(r"^([1-5]XX|[1-5][0-9][0-9]|XXX)$")

HTTP_METHODS = ("get", "put", "post", "delete", "patch", "head", "options")


def validate_status_pattern(pattern: str) -> bool:
    """True if pattern is an exact HTTP code, a class like "2XX", or "XXX"."""
    return bool(_STATUS_PATTERN_RE.match(pattern))


def status_pattern_matches(pattern: str, status: int) -> bool:
    """Match an observed status code against a declared pattern."""
    if pattern == "XXX":
        return True
    if pattern.endswith("XX"):
        return 100 <= status <= 599 and str(status)[0] == pattern[0]
    return str(status) == pattern


def any_pattern_matches(patterns, status: int) -> bool:
    return any(status_pattern_matches(p, status) for p in patterns)


# --- IR types ---------------------------------------------------------------

ANY_KIND = "any"
SCHEMA_KINDS = ("object", "array", "string", "integer", "number", "boolean", ANY_KIND)


@dataclass(frozen=True)
class SchemaNode:
    """Resolved schema subset; ``kind == "any"`` accepts every value."""

    kind: str = ANY_KIND
    nullable: bool = False
    enum_values: tuple = ()
    minimum: float | int | None = None
    maximum: float | int | None = None
    pattern: str | None = None
    min_length: int | None = None
    max_length: int | None = None
    format: str | None = None
    min_items: int | None = None
    max_items: int | None = None
    items: "SchemaNode | None" = None
    required_fields: tuple[str, ...] = ()
    properties: tuple[tuple[str, "SchemaNode"], ...] = ()

    def property_map(self) -> dict[str, "SchemaNode"]:
        return dict(self.properties)


ANY_SCHEMA = SchemaNode()


@dataclass(frozen=True)
class ParameterDef:
    name: str
    location: str  # path | query | header | body-field
    schema: SchemaNode = ANY_SCHEMA
    required: bool = False


@dataclass(frozen=True)
class ResponseDef:
    status_pattern: str
    body_schema: SchemaNode | None = None
    content_types: tuple[str, ...] = ()


@dataclass(frozen=True)
class OperationDef:
    method: str
    path_template: str
    parameters: tuple[ParameterDef, ...] = ()
    request_body_schema: SchemaNode | None = None
    responses: tuple[tuple[str, ResponseDef], ...] = ()

    @property
    def operation_id(self) -> str:
        return f"{self.method} {self.path_template}"

    def response_map(self) -> dict[str, ResponseDef]:
        return dict(self.responses)

    def path_parameters(self) -> list[ParameterDef]:
        return [p for p in self.parameters if p.location == "path"]

    def parameters_in(self, *locations: str) -> list[ParameterDef]:
        return [p for p in self.parameters if p.location in locations]


@dataclass(frozen=True)
class LintFinding:
    rule_id: str
    severity: str  # warning | error
    location: str
    message: str


@dataclass
class ApiSpecIR:
    """Fully resolved in-memory form of an OpenAPI document."""

    title: str
    base_paths: list[str]
    operations: list[OperationDef]
    schemas: dict[str, SchemaNode]
    load_warnings: list[LintFinding] = field(default_factory=list)

    def operations_by_id(self) -> dict[str, OperationDef]:
        return {op.operation_id: op for op in self.operations}

    def operation(self, operation_id: str) -> OperationDef:
        for op in self.operations:
            if op.operation_id == operation_id:
                return op
        raise KeyError(operation_id)

    def __eq__(self, other) -> bool:  # load_warnings are advisory, not identity
        if not isinstance(other, ApiSpecIR):
            return NotImplemented
        return (
            self.title == other.title
            and self.base_paths == other.base_paths
            and self.operations == other.operations
            and self.schemas == other.schemas
        )


# --- lint catalog -----------------------------------------------------------

LINT_RULES: dict[str, str] = {
    "missing-response-schema": "success response (other than 204) declares no body schema",
    "orphan-path-parameter": "path parameter matches no field produced by any response",
    "no-4xx-declared": "operation takes input but declares no 4XX response",
    "delete-without-id": "DELETE operation has no path parameter identifying the target",
    "unsupported-schema-keyword": "schema keyword outside the supported subset was ignored",
    "composition-branch-chosen": "oneOf/anyOf reduced to its first branch",
    "schema-cycle-degraded": "self-referential schema degraded to the permissive any-schema",
    "undeclared-path-parameter": "path template names a parameter the operation never declares",
    "unsupported-parameter-location": "parameter location outside path/query/header was skipped",
    "required-field-undeclared": "required list names a field missing from properties",
    "non-json-body": "request or response body has no JSON content; generation/checking limited",
}


def _warn(warnings: list[LintFinding], rule_id: str, location: str, message: str) -> None:
    warnings.append(LintFinding(rule_id, "warning", location, message))


# --- $ref resolution ---------------------------------------------------------

def _pointer_lookup(doc: dict, ref: str):
    if not ref.startswith("#/"):
        raise UnresolvedRef(f"only internal references are supported: {ref!r}")
    node: Any = doc
    for raw_part in ref[2:].split("/"):
        part = raw_part.replace("~1", "/").replace("~0", "~")
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise UnresolvedRef(f"dangling reference: {ref!r}") from None
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise UnresolvedRef(f"dangling reference: {ref!r}")
    return node


def resolve_refs(doc: dict, warnings: list[LintFinding] | None = None) -> dict:
    """Return a copy of the document with every internal ``$ref`` spliced in.

    Cyclic references degrade to an empty (permissive) schema rather than
    recursing forever.  Resolving an already-resolved document returns an
    equal document.
    """
    sink = warnings if warnings is not None else []

    def resolve(node, stack: tuple[str, ...]):
        if isinstance(node, dict):
            if "$ref" in node:
                ref = node["$ref"]
                if not isinstance(ref, str):
                    raise UnresolvedRef(f"non-string $ref: {ref!r}")
                if ref in stack:
                    _warn(sink, "schema-cycle-degraded", ref,
                          f"reference cycle through {ref!r}; degraded to any-schema")
                    return {}
                target = _pointer_lookup(doc, ref)
                return resolve(target, stack + (ref,))
            return {k: resolve(v, stack) for k, v in node.items()}
        if isinstance(node, list):
            return [resolve(v, stack) for v in node]
        return node

    return resolve(doc, ())


# --- schema construction ------------------------------------------------------

_SCHEMA_ANNOTATIONS = {
    "title", "description", "example", "examples", "default", "deprecated",
    "readOnly", "writeOnly", "xml", "externalDocs", "$comment",
}
_SCHEMA_SUPPORTED = {
    "type", "nullable", "enum", "minimum", "maximum", "pattern", "minLength",
    "maxLength", "format", "minItems", "maxItems", "items", "properties",
    "required", "allOf", "oneOf", "anyOf", "additionalProperties",
}


def _merge_allof(branches: list[SchemaNode], location: str,
                 warnings: list[LintFinding]) -> SchemaNode:
    objects = [b for b in branches if b.kind == "object"]
    if len(objects) != len(branches):
        non_obj = [b for b in branches if b.kind not in ("object", ANY_KIND)]
        if non_obj:
            if len(non_obj) == 1 and not objects:
                return non_obj[0]
            _warn(warnings, "unsupported-schema-keyword", location,
                  "allOf over mixed kinds; degraded to any-schema")
            return ANY_SCHEMA
    props: dict[str, SchemaNode] = {}
    required: list[str] = []
    nullable = False
    for b in objects:
        props.update(b.property_map())
        for r in b.required_fields:
            if r not in required:
                required.append(r)
        nullable = nullable or b.nullable
    return SchemaNode(
        kind="object",
        nullable=nullable,
        required_fields=tuple(r for r in required if r in props),
        properties=tuple(props.items()),
    )


def _schema_node(raw, location: str, warnings: list[LintFinding]) -> SchemaNode:
    if raw is None or raw is True or raw == {}:
        return ANY_SCHEMA
    if raw is False:
        _warn(warnings, "unsupported-schema-keyword", location,
              "boolean 'false' schema degraded to any-schema")
        return ANY_SCHEMA
    if not isinstance(raw, dict):
        _warn(warnings, "unsupported-schema-keyword", location,
              f"non-object schema {type(raw).__name__}; degraded to any-schema")
        return ANY_SCHEMA

    for key in raw:
        if key not in _SCHEMA_SUPPORTED and key not in _SCHEMA_ANNOTATIONS:
            _warn(warnings, "unsupported-schema-keyword", location,
                  f"keyword {key!r} ignored")

    if "allOf" in raw:
        branches = [
            _schema_node(b, f"{location}.allOf[{i}]", warnings)
            for i, b in enumerate(raw["allOf"])
        ]
        return _merge_allof(branches, location, warnings)
    for comb in ("oneOf", "anyOf"):
        if comb in raw:
            branches = raw[comb]
            if not isinstance(branches, list) or not branches:
                _warn(warnings, "unsupported-schema-keyword", location,
                      f"empty {comb}; degraded to any-schema")
                return ANY_SCHEMA
            if len(branches) > 1:
                _warn(warnings, "composition-branch-chosen", location,
                      f"{comb} with {len(branches)} branches; using the first")
            return _schema_node(branches[0], f"{location}.{comb}[0]", warnings)

    raw_type = raw.get("type")
    nullable = bool(raw.get("nullable", False))
    if isinstance(raw_type, list):  # 3.1 style ["string", "null"]
        non_null = [t for t in raw_type if t != "null"]
        nullable = nullable or "null" in raw_type
        raw_type = non_null[0] if non_null else None
    if raw_type is None:
        if "properties" in raw or "required" in raw:
            raw_type = "object"
        elif "items" in raw:
            raw_type = "array"
        elif "enum" in raw and raw["enum"]:
            sample = raw["enum"][0]
            raw_type = {str: "string", bool: "boolean", int: "integer",
                        float: "number"}.get(type(sample), ANY_KIND)
        else:
            raw_type = ANY_KIND
    if raw_type == "null":
        return SchemaNode(kind=ANY_KIND, nullable=True)
    if raw_type not in SCHEMA_KINDS:
        _warn(warnings, "unsupported-schema-keyword", location,
              f"type {raw_type!r} degraded to any-schema")
        return SchemaNode(kind=ANY_KIND, nullable=nullable)

    properties: tuple[tuple[str, SchemaNode], ...] = ()
    required: tuple[str, ...] = ()
    if raw_type == "object":
        props = raw.get("properties", {}) or {}
        properties = tuple(
            (name, _schema_node(sub, f"{location}.properties.{name}", warnings))
            for name, sub in props.items()
        )
        declared = {name for name, _ in properties}
        req_raw = [r for r in raw.get("required", []) or []]
        for r in req_raw:
            if r not in declared:
                _warn(warnings, "required-field-undeclared", location,
                      f"required field {r!r} is not declared in properties")
        required = tuple(r for r in req_raw if r in declared)

    items = None
    if raw_type == "array":
        items = _schema_node(raw.get("items"), f"{location}.items", warnings)

    return SchemaNode(
        kind=raw_type,
        nullable=nullable,
        enum_values=tuple(raw.get("enum", []) or []),
        minimum=raw.get("minimum"),
        maximum=raw.get("maximum"),
        pattern=raw.get("pattern"),
        min_length=raw.get("minLength"),
        max_length=raw.get("maxLength"),
        format=raw.get("format"),
        min_items=raw.get("minItems"),
        max_items=raw.get("maxItems"),
        items=items,
        required_fields=required,
        properties=properties,
    )


# --- document loading ---------------------------------------------------------

_PATH_PARAM_RE = re.compile(r"\{([^{}/]+)\}")


def _json_content_schema(content: dict, location: str,
                         warnings: list[LintFinding]):
    """Pick the JSON media type schema out of a ``content`` table."""
    content_types = tuple(content.keys())
    for ctype, media in content.items():
        base = ctype.split(";")[0].strip().lower()
        if base == "application/json" or base.endswith("+json"):
            return _schema_node(media.get("schema"), location, warnings), content_types
    if content_types:
        _warn(warnings, "non-json-body", location,
              f"no JSON media type among {list(content_types)}")
    return None, content_types


def _build_parameter(raw: dict, location: str,
                     warnings: list[LintFinding]) -> ParameterDef | None:
    name = raw.get("name", "")
    where = raw.get("in", "")
    if not name:
        raise ParseError(f"parameter without a name at {location}")
    if where not in ("path", "query", "header"):
        _warn(warnings, "unsupported-parameter-location", f"{location}#{name}",
              f"parameter location {where!r} skipped")
        return None
    if "schema" in raw:
        schema = _schema_node(raw["schema"], f"{location}#{name}", warnings)
    elif "content" in raw:
        schema, _ = _json_content_schema(raw["content"], f"{location}#{name}", warnings)
        schema = schema or ANY_SCHEMA
    else:
        schema = ANY_SCHEMA
    required = bool(raw.get("required", False)) or where == "path"
    return ParameterDef(name=name, location=where, schema=schema, required=required)


def _build_operation(method: str, path: str, raw_op: dict, path_params: list[dict],
                     warnings: list[LintFinding]) -> OperationDef:
    loc = f"{method.upper()} {path}"
    merged: dict[tuple[str, str], dict] = {}
    for raw in list(path_params) + list(raw_op.get("parameters", []) or []):
        merged[(raw.get("name", ""), raw.get("in", ""))] = raw
    params: list[ParameterDef] = []
    for raw in merged.values():
        built = _build_parameter(raw, loc, warnings)
        if built is not None:
            params.append(built)

    body_schema = None
    if "requestBody" in raw_op:
        content = (raw_op["requestBody"] or {}).get("content", {}) or {}
        body_schema, _ = _json_content_schema(content, f"{loc}#requestBody", warnings)
        if body_schema is not None and body_schema.kind == "object":
            required = set(body_schema.required_fields)
            for fname, fschema in body_schema.properties:
                params.append(ParameterDef(
                    name=fname, location="body-field",
                    schema=fschema, required=fname in required))

    declared_path_names = {p.name for p in params if p.location == "path"}
    for seg in _PATH_PARAM_RE.findall(path):
        if seg not in declared_path_names:
            _warn(warnings, "undeclared-path-parameter", loc,
                  f"path parameter {{{seg}}} has no declaration; synthesized")
            params.append(ParameterDef(
                name=seg, location="path",
                schema=SchemaNode(kind="string"), required=True))

    responses: list[tuple[str, ResponseDef]] = []
    for code, raw_resp in (raw_op.get("responses", {}) or {}).items():
        pattern = "XXX" if code == "default" else str(code).upper()
        if not validate_status_pattern(pattern):
            raise ParseError(f"invalid response status pattern {code!r} at {loc}")
        resp_schema, ctypes = (None, ())
        if raw_resp and "content" in raw_resp:
            resp_schema, ctypes = _json_content_schema(
                raw_resp["content"] or {}, f"{loc}#response[{pattern}]", warnings)
        responses.append((pattern, ResponseDef(pattern, resp_schema, ctypes)))

    return OperationDef(
        method=method.upper(),
        path_template=path,
        parameters=tuple(params),
        request_body_schema=body_schema,
        responses=tuple(responses),
    )


def load_spec(document: bytes | str, fmt: str = "json") -> ApiSpecIR:
    """Parse, reference-resolve, and validate an OpenAPI 3.x document."""
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not UTF-8: {exc}") from exc
    if fmt == "json":
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    elif fmt == "yaml":
        try:
            doc = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ParseError(f"invalid YAML: {exc}") from exc
    else:
        raise ValueError(f"unknown format {fmt!r}; expected 'json' or 'yaml'")

    if not isinstance(doc, dict):
        raise ParseError("document root is not an object")
    if "swagger" in doc:
        raise UnsupportedVersion(
            f"Swagger {doc['swagger']!r} documents are not supported; convert to OpenAPI 3.x")
    version = doc.get("openapi")
    if not isinstance(version, str) or not version.startswith("3."):
        raise UnsupportedVersion(f"not an OpenAPI 3.x document (openapi={version!r})")

    warnings: list[LintFinding] = []
    resolved = resolve_refs(doc, warnings)

    paths = resolved.get("paths", {}) or {}
    if not isinstance(paths, dict):
        raise ParseError("'paths' is not an object")

    operations: list[OperationDef] = []
    for path in sorted(paths):
        raw_path = paths[path] or {}
        path_level_params = raw_path.get("parameters", []) or []
        for method in HTTP_METHODS:
            if method in raw_path:
                operations.append(_build_operation(
                    method, path, raw_path[method] or {}, path_level_params, warnings))

    seen: set[tuple[str, str]] = set()
    for op in operations:
        key = (op.method, op.path_template)
        if key in seen:
            raise ParseError(f"duplicate operation {op.operation_id}")
        seen.add(key)

    schemas: dict[str, SchemaNode] = {}
    for name, raw_schema in (resolved.get("components", {}) or {}).get("schemas", {}).items():
        schemas[name] = _schema_node(raw_schema, f"components.schemas.{name}", warnings)

    return ApiSpecIR(
        title=str((resolved.get("info") or {}).get("title", "")),
        base_paths=sorted(paths),
        operations=operations,
        schemas=schemas,
        load_warnings=warnings,
    )


def load_spec_file(path: str, fmt: str | None = None) -> ApiSpecIR:
    """Load a spec from disk, autodetecting the format from the extension."""
    if fmt is None:
        lowered = path.lower()
        fmt = "yaml" if lowered.endswith((".yaml", ".yml")) else "json"
    with open(path, "rb") as fh:
        return load_spec(fh.read(), fmt)


# --- canonical serialization (round-trip) -------------------------------------

def _schema_jsonable(s: SchemaNode) -> dict:
    out: dict[str, Any] = {"kind": s.kind}
    if s.nullable:
        out["nullable"] = True
    for key in ("minimum", "maximum", "pattern", "min_length", "max_length",
                "format", "min_items", "max_items"):
        val = getattr(s, key)
        if val is not None:
            out[key] = val
    if s.enum_values:
        out["enum_values"] = list(s.enum_values)
    if s.items is not None:
        out["items"] = _schema_jsonable(s.items)
    if s.required_fields:
        out["required_fields"] = list(s.required_fields)
    if s.properties:
        out["properties"] = [[n, _schema_jsonable(p)] for n, p in s.properties]
    return out


def _schema_from_jsonable(data: dict) -> SchemaNode:
    return SchemaNode(
        kind=data.get("kind", ANY_KIND),
        nullable=bool(data.get("nullable", False)),
        enum_values=tuple(data.get("enum_values", [])),
        minimum=data.get("minimum"),
        maximum=data.get("maximum"),
        pattern=data.get("pattern"),
        min_length=data.get("min_length"),
        max_length=data.get("max_length"),
        format=data.get("format"),
        min_items=data.get("min_items"),
        max_items=data.get("max_items"),
        items=_schema_from_jsonable(data["items"]) if "items" in data else None,
        required_fields=tuple(data.get("required_fields", [])),
        properties=tuple(
            (n, _schema_from_jsonable(p)) for n, p in data.get("properties", [])),
    )


def spec_to_jsonable(spec: ApiSpecIR) -> dict:
    """Canonical JSON-able form of the IR; reloads to an equal IR."""
    return {
        "ir_version": 1,
        "title": spec.title,
        "base_paths": list(spec.base_paths),
        "operations": [
            {
                "method": op.method,
                "path_template": op.path_template,
                "parameters": [
                    {"name": p.name, "location": p.location,
                     "required": p.required, "schema": _schema_jsonable(p.schema)}
                    for p in op.parameters
                ],
                "request_body_schema": (
                    _schema_jsonable(op.request_body_schema)
                    if op.request_body_schema is not None else None),
                "responses": [
                    {"status_pattern": pattern,
                     "body_schema": (_schema_jsonable(r.body_schema)
                                     if r.body_schema is not None else None),
                     "content_types": list(r.content_types)}
                    for pattern, r in op.responses
                ],
            }
            for op in spec.operations
        ],
        "schemas": {name: _schema_jsonable(s) for name, s in spec.schemas.items()},
    }


def spec_from_jsonable(data: dict) -> ApiSpecIR:
    """Inverse of :func:`spec_to_jsonable`."""
    operations = []
    for raw in data.get("operations", []):
        operations.append(OperationDef(
            method=raw["method"],
            path_template=raw["path_template"],
            parameters=tuple(
                ParameterDef(p["name"], p["location"],
                             _schema_from_jsonable(p["schema"]), p["required"])
                for p in raw.get("parameters", [])),
            request_body_schema=(
                _schema_from_jsonable(raw["request_body_schema"])
                if raw.get("request_body_schema") is not None else None),
            responses=tuple(
                (r["status_pattern"], ResponseDef(
                    r["status_pattern"],
                    (_schema_from_jsonable(r["body_schema"])
                     if r.get("body_schema") is not None else None),
                    tuple(r.get("content_types", []))))
                for r in raw.get("responses", [])),
        ))
    return ApiSpecIR(
        title=data.get("title", ""),
        base_paths=list(data.get("base_paths", [])),
        operations=operations,
        schemas={name: _schema_from_jsonable(s)
                 for name, s in data.get("schemas", {}).items()},
    )


# --- lint ---------------------------------------------------------------------

def _success_response_fields(spec: ApiSpecIR) -> set[str]:
    """Top-level field names any operation can produce in a success body."""
    fields: set[str] = set()
    for op in spec.operations:
        for pattern, resp in op.responses:
            if not pattern.startswith("2"):
                continue
            schema = resp.body_schema
            if schema is None:
                continue
            if schema.kind == "array" and schema.items is not None:
                schema = schema.items
            for name, _ in schema.properties:
                fields.add(name)
    return fields


def lint_spec(spec: ApiSpecIR,
              threshold: float = DEFAULT_MATCH_THRESHOLD) -> list[LintFinding]:
    """Report spec pitfalls; never raises.  Deterministic order for equal specs."""
    findings: list[LintFinding] = list(spec.load_warnings)
    produced = sorted(_success_response_fields(spec))

    for op in spec.operations:
        loc = op.operation_id

        for pattern, resp in op.responses:
            success = pattern.startswith("2") or pattern == "XXX"
            if success and pattern != "204" and resp.body_schema is None \
                    and not resp.content_types:
                findings.append(LintFinding(
                    "missing-response-schema", "warning",
                    f"{loc}#response[{pattern}]",
                    f"success response {pattern} declares no body schema"))

        for param in op.path_parameters():
            if not any(match_names(param.name, f) >= threshold for f in produced):
                findings.append(LintFinding(
                    "orphan-path-parameter", "error",
                    f"{loc}#param[{param.name}]",
                    f"no operation produces a field matching {param.name!r}; "
                    f"requests can only guess this value"))

        takes_input = bool(op.parameters) or op.request_body_schema is not None
        declares_4xx = any(p.startswith("4") for p, _ in op.responses)
        if takes_input and not declares_4xx:
            findings.append(LintFinding(
                "no-4xx-declared", "warning", loc,
                "operation takes input but declares no 4XX response"))

        if op.method == "DELETE" and not op.path_parameters():
            findings.append(LintFinding(
                "delete-without-id", "warning", loc,
                "DELETE operation has no path parameter identifying the target"))

    return findings
