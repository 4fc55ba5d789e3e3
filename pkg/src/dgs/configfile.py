"""Flat key = value configuration files.

One assignment per line, values in Python literal syntax (numbers, strings,
tuples, lists, booleans, None), comments with '#'. Parsing is strict: a
malformed line or a duplicate key is an error, and loaders validate against
the target's known keys so a typoed hyperparameter cannot slip through
silently. Serialization uses repr, so parse -> write -> parse round-trips.
"""

from __future__ import annotations

import ast
from pathlib import Path

__all__ = ["parse_config", "format_config", "read_config", "write_config"]


def parse_config(text: str) -> dict:
    """Parse flat assignments into a dict of Python values.

    Raises ValueError naming the offending line for anything that is not a
    ``key = literal`` assignment, and on duplicated keys.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key.isidentifier():
            raise ValueError(f"line {lineno}: {key!r} is not a valid key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        value = value.strip()
        if not value:
            raise ValueError(f"line {lineno}: empty value for {key!r}")
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError) as err:
            raise ValueError(f"line {lineno}: could not parse value {value!r} for {key!r}: {err}") from None
    return out


def format_config(mapping: dict) -> str:
    """Serialize a dict so parse_config reads it back equal."""
    lines = []
    for key, value in mapping.items():
        if not str(key).isidentifier():
            raise ValueError(f"{key!r} is not a valid config key")
        rendered = repr(value)
        try:
            if ast.literal_eval(rendered) != value:
                raise ValueError
        except (ValueError, SyntaxError):
            raise ValueError(f"value for {key!r} is not representable as a literal: {value!r}") from None
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def write_config(path, mapping: dict) -> None:
    Path(path).write_text(format_config(mapping), encoding="utf-8")
