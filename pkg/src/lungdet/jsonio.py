"""Byte-stable JSON: sorted keys, floats written with exactly six decimals."""
from __future__ import annotations

import json
import math

import numpy as np

FLOAT_DECIMALS = 6


def _encode(obj, indent: int, level: int, parts: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        parts.append(json.dumps(bool(obj)) if obj is not None else "null")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError(f"non-finite float {v} cannot be serialized")
        s = f"{v:.{FLOAT_DECIMALS}f}"
        if s.startswith("-") and float(s) == 0.0:
            s = s[1:]
        parts.append(s)
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        pad, inner = "\n" + " " * (indent * level), "\n" + " " * (indent * (level + 1))
        parts.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                parts.append(",")
            parts.append(inner + json.dumps(str(key), ensure_ascii=False) + ": ")
            _encode(obj[key], indent, level + 1, parts)
        parts.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            parts.append("[]")
            return
        # scalar-only lists (bboxes, thresholds) stay on one line
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            parts.append("[")
            for i, v in enumerate(obj):
                if i:
                    parts.append(", ")
                _encode(v, indent, level + 1, parts)
            parts.append("]")
            return
        pad, inner = "\n" + " " * (indent * level), "\n" + " " * (indent * (level + 1))
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            parts.append(inner)
            _encode(v, indent, level + 1, parts)
        parts.append(pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    parts: list[str] = []
    _encode(obj, indent, 0, parts)
    return "".join(parts) + "\n"


def loads(text: str):
    return json.loads(text)


def fixed(v: float) -> float:
    """Round to the serialized precision so that load(dump(x)) == x."""
    return float(f"{float(v):.{FLOAT_DECIMALS}f}") + 0.0
