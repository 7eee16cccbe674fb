"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`ExperimentConfig`; values are parsed according to the field type
(integers accept ``0x`` prefixes). Example::

    # cache geometry
    cache_lines = 32
    associativity = 8
    policies = belady,lru,phase
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # trace source: a trace file, else a stock synthetic spec name or JSON spec path
    trace: str = ""
    synth: str = "default"
    line_size: int = 64
    # cache
    cache_lines: int = 32
    associativity: int = 8
    policies: str = "belady,lru,phase"
    rolling_window: int = 100
    # phases
    slice_len: int = 100
    merge_threshold: float = 0.4
    global_threshold: float = 0.4
    dpc_weight: float = 1.0
    # streams
    min_length: int = 8
    max_gap: int = 16
    stream_id: int = -1
    stream_base: int = -1
    stream_stride: int = 0
    fraction: float = 1.0
    # model
    d_e: int = 32
    d_h: int = 64
    window: int = 32
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    # probes
    pca_k: int = 5
    embedding_k: int = 3
    seed: int = 0

    def policy_list(self) -> list[str]:
        names = [p.strip() for p in self.policies.split(",") if p.strip()]
        unknown = set(names) - {"belady", "lru", "phase", "model"}
        if unknown:
            raise ConfigError(f"unknown policies: {', '.join(sorted(unknown))}")
        # Belady first, then in the order given
        return sorted(dict.fromkeys(names), key=lambda p: p != "belady")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _convert(name: str, kind, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw, 0)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, row in enumerate(text.splitlines(), start=1):
        row = row.split("#", 1)[0].strip()
        if not row:
            continue
        if "=" not in row:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in row.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, types[key], raw)
    return ExperimentConfig(**values)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
