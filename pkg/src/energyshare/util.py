"""Shared helpers: identifier validation, float formatting, key=value codecs.

Every textual artifact in this package (wire messages, trace CSV, metadata
files) must round-trip bit-exactly, so floats are always printed with
``repr`` (shortest round-trip form) and identifiers are restricted to a
charset that is safe in all of those encodings.
"""

from __future__ import annotations

import math
import re

_ID_RE = re.compile(r"[A-Za-z0-9_.:-]+\Z")


def check_id(value: str, what: str = "identifier") -> str:
    """Validate an id token (no whitespace, '=', ',' or newlines)."""
    if not isinstance(value, str) or not _ID_RE.match(value):
        raise ValueError(f"{what} {value!r} must match [A-Za-z0-9_.:-]+")
    return value


def fmt_float(x: float) -> str:
    """Shortest representation that parses back to exactly the same float."""
    return repr(float(x))


def fmt_bool(x: bool) -> str:
    return "true" if x else "false"


def parse_bool(token: str) -> bool:
    if token == "true":
        return True
    if token == "false":
        return False
    raise ValueError(f"expected 'true' or 'false', got {token!r}")


def rel_close(a: float, b: float, tol: float = 1e-9) -> bool:
    """Relative closeness with a floor of 1.0 so near-zero values compare sanely."""
    if math.isnan(a) or math.isnan(b):
        return False
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def parse_fields(tokens: list[str]) -> dict[str, str]:
    """Parse ``key=value`` tokens into a dict, rejecting malformed or duplicate keys."""
    fields: dict[str, str] = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise ValueError(f"malformed field token {token!r}")
        if key in fields:
            raise ValueError(f"duplicate field {key!r}")
        fields[key] = value
    return fields
