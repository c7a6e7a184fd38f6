"""Total structured-output parsing for model completions.

Models wrap JSON in prose, code fences, or nothing at all. parse_structured
tries progressively harder extraction stages (direct parse, fenced block,
first balanced object) and then validates against a declared schema. It
never raises on malformed text: the result always carries either a valid
value or a typed failure plus the raw text, so the caller can attach it to
a trace and decide how to degrade.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

PARSE_FAILURE = "parse_failure"
SCHEMA_VIOLATION = "schema_violation"

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class FieldSpec:
    """One schema field: accepted types, requiredness, optional numeric range
    and list item type."""

    types: tuple[type, ...]
    required: bool = True
    minimum: float | None = None
    maximum: float | None = None
    item_type: type | None = None
    non_empty: bool = False


@dataclass(frozen=True)
class SchemaDescriptor:
    name: str
    fields: dict[str, FieldSpec]
    allow_unknown: bool = False


@dataclass(frozen=True)
class ParseResult:
    """Outcome of one parse attempt; `error` is None exactly when valid."""

    value: dict | None
    raw: str
    error: str | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None


def _candidates(raw: str):
    """Yield JSON-looking substrings in decreasing order of confidence."""
    yield raw.strip()
    for m in _FENCE_RE.finditer(raw):
        yield m.group(1).strip()
    yield from _balanced_objects(raw)


def _balanced_objects(raw: str):
    """Brace-matching scan that respects strings and escapes."""
    depth = 0
    start = -1
    in_string = False
    escape = False
    for i, ch in enumerate(raw):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    yield raw[start: i + 1]


def _check_value(key: str, value, spec: FieldSpec) -> str | None:
    """Return a violation message or None. bool is never accepted where a
    number is declared (JSON true would otherwise pass as int)."""
    if isinstance(value, bool) and bool not in spec.types:
        return f"{key}: expected {_names(spec.types)}, got bool"
    if float in spec.types and isinstance(value, int):
        value = float(value)
    if int in spec.types and isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, spec.types):
        return f"{key}: expected {_names(spec.types)}, got {type(value).__name__}"
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if spec.minimum is not None and value < spec.minimum:
            return f"{key}: {value} below minimum {spec.minimum}"
        if spec.maximum is not None and value > spec.maximum:
            return f"{key}: {value} above maximum {spec.maximum}"
    if spec.non_empty and isinstance(value, str) and not value.strip():
        return f"{key}: must be non-empty"
    if spec.item_type is not None and isinstance(value, list):
        for item in value:
            if not isinstance(item, spec.item_type) or isinstance(item, bool):
                return f"{key}: list items must be {spec.item_type.__name__}"
    return None


def _names(types: tuple[type, ...]) -> str:
    return "/".join(t.__name__ for t in types)


def _coerce(obj: dict, schema: SchemaDescriptor) -> dict:
    """Normalize numerics after validation (ints where floats declared, etc.)."""
    out = {}
    for key, value in obj.items():
        spec = schema.fields.get(key)
        if spec is not None and not isinstance(value, bool):
            if float in spec.types and isinstance(value, int):
                value = float(value)
            elif int in spec.types and isinstance(value, float) and value.is_integer():
                value = int(value)
        out[key] = value
    return out


def validate(obj, schema: SchemaDescriptor, raw: str) -> ParseResult:
    if not isinstance(obj, dict):
        return ParseResult(None, raw, SCHEMA_VIOLATION,
                           f"{schema.name}: expected a JSON object, got {type(obj).__name__}")
    problems = []
    unknown = sorted(set(obj) - set(schema.fields)) if not schema.allow_unknown else []
    if unknown:
        problems.append(f"unknown keys: {unknown}")
    for key, spec in schema.fields.items():
        if key not in obj:
            if spec.required:
                problems.append(f"missing required key: {key}")
            continue
        msg = _check_value(key, obj[key], spec)
        if msg:
            problems.append(msg)
    if problems:
        return ParseResult(None, raw, SCHEMA_VIOLATION,
                           f"{schema.name}: " + "; ".join(problems))
    return ParseResult(_coerce(obj, schema), raw)


def parse_structured(raw: str, schema: SchemaDescriptor) -> ParseResult:
    """Extract and validate the first JSON object found in `raw`.

    Total: returns a ParseResult in all cases. Extraction failures yield
    PARSE_FAILURE; a parsed object failing the schema yields
    SCHEMA_VIOLATION with the offending keys listed.
    """
    schema_failure: ParseResult | None = None
    for candidate in _candidates(raw):
        if not candidate:
            continue
        try:
            obj = json.loads(candidate)
        except (json.JSONDecodeError, ValueError):
            continue
        result = validate(obj, schema, raw)
        if result.ok:
            return result
        if schema_failure is None:
            schema_failure = result
    if schema_failure is not None:
        return schema_failure
    return ParseResult(None, raw, PARSE_FAILURE,
                       f"{schema.name}: no JSON object found in completion")
