"""Run reports: deterministic body plus out-of-band wall time."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(_plain(p), sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()[:16]


@dataclass
class RunReport:
    command: str
    inputs_digest: str
    seed: int
    outputs: dict
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def body(self) -> dict:
        """Everything except wall time; identical across reruns."""
        return _plain(
            {
                "command": self.command,
                "inputs_digest": self.inputs_digest,
                "seed": self.seed,
                "outputs": self.outputs,
                "counters": self.counters,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.body(), indent=2, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        lines: list[str] = []
        _flatten(self.body(), "", lines)
        return "\n".join(lines) + "\n"

    def render(self, fmt: str = "text") -> str:
        return self.to_json() if fmt == "json" else self.to_text()


def _flatten(value, prefix: str, out: list[str]):
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(v, f"{prefix}.{k}" if prefix else k, out)
    elif isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value):
        for i, v in enumerate(value):
            _flatten(v, f"{prefix}[{i}]", out)
    else:
        out.append(f"{prefix}: {json.dumps(value, ensure_ascii=False)}")
