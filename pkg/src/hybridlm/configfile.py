"""Flat ``[section]`` / ``key = value`` config text with exact round-trips.

Only primitives appear in these files (int, float, bool, str). Floats are
rendered with repr, which Python guarantees to round-trip float64 exactly,
so parse(render(config)) reproduces every field bit for bit.
"""

from __future__ import annotations

import dataclasses
import typing

__all__ = [
    "render_sections",
    "parse_sections",
    "dataclass_to_dict",
    "dataclass_from_dict",
]


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        if "\n" in v or v != v.strip():
            raise ValueError(f"string value not representable: {v!r}")
        return v
    raise TypeError(f"unsupported config value type: {type(v).__name__}")


def render_sections(sections: dict[str, dict]) -> str:
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for key, value in kv.items():
            lines.append(f"{key} = {_render_value(value)}")
        lines.append("")
    return "\n".join(lines)


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    """Raw string values; duplicate sections or keys are errors."""
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ValueError(f"line {lineno}: empty section name")
            if name in sections:
                raise ValueError(f"line {lineno}: duplicate section [{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ValueError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in current:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return sections


def dataclass_to_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _parse_typed(text: str, typ, key: str):
    if typ is bool:
        if text == "true":
            return True
        if text == "false":
            return False
        raise ValueError(f"{key}: expected true/false, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is str:
        return text
    raise TypeError(f"{key}: unsupported field type {typ!r}")


def dataclass_from_dict(cls, kv: dict[str, str]):
    """Instantiate cls from raw strings; unknown or missing-required keys fail."""
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(kv) - set(known)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, raw in kv.items():
        kwargs[name] = _parse_typed(raw, hints[name], name)
    return cls(**kwargs)
