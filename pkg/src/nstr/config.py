"""Flat ``key = value`` configuration files.

One assignment per line, ``#`` starts a comment. Keys are namespaced
(``corpus.*``, ``model.*``, ``bm25.*``, ``train.<stage>.*``, ``noise.*``,
``pipeline.*``, ``eval.*``, ``bench.*``) plus the global ``seed``. Unknown
keys are rejected and every value is coerced to the type of its default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ParseError
from .pipeline import PipelineConfig


@dataclass(frozen=True)
class EvalConfig:
    depth: int = 100
    mrr_k: tuple[int, ...] = (10,)
    recall_k: tuple[int, ...] = (20, 50, 100)
    ndcg_k: tuple[int, ...] = (10,)
    answer_k: tuple[int, ...] = (20, 100)
    proportions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class BenchConfig:
    n_passages: int = 2000
    n_train: int = 300
    n_eval: int = 200
    n_seeds: int = 5
    positional_scale: float = 1.0


@dataclass(frozen=True)
class Config:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def seed(self) -> int:
        return self.pipeline.seed

    def with_seed(self, seed: int) -> Config:
        return dataclasses.replace(self, pipeline=dataclasses.replace(self.pipeline, seed=seed))

    def to_flat(self) -> dict:
        flat = self.pipeline.snapshot()
        for ns in ("eval", "bench"):
            section = getattr(self, ns)
            for f in dataclasses.fields(section):
                flat[f"{ns}.{f.name}"] = getattr(section, f.name)
        return dict(sorted(flat.items()))

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> Config:
        sections: dict[str, dict] = {"eval": {}, "bench": {}}
        rest = {}
        for key, value in flat.items():
            ns = key.split(".", 1)[0]
            if ns in sections:
                sections[ns][key.split(".", 1)[1]] = value
            else:
                rest[key] = value
        base = cls()
        out = {"pipeline": PipelineConfig.from_flat(rest)}
        for ns, kw in sections.items():
            known = {f.name for f in dataclasses.fields(getattr(base, ns))}
            unknown = sorted(set(kw) - known)
            if unknown:
                raise KeyError(f"unknown config key(s): {', '.join(f'{ns}.{k}' for k in unknown)}")
            out[ns] = dataclasses.replace(getattr(base, ns), **kw)
        return cls(**out)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def coerce(raw: str, default):
    """Parse ``raw`` into the type of ``default``."""
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        elem = default[0] if default else 0.0
        return tuple(coerce(part, elem) for part in text.split(",") if part.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        if text.lower() == "none":
            return None
        return float(text)
    return text


def parse_config(text: str, source: str = "<config>") -> Config:
    defaults = Config().to_flat()
    flat: dict = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(source, line_no, "expected 'key = value'")
        if key not in defaults:
            raise ParseError(source, line_no, f"unknown config key {key!r}")
        if key in flat:
            raise ParseError(source, line_no, f"duplicate config key {key!r}")
        try:
            flat[key] = coerce(value, defaults[key])
        except ValueError as exc:
            raise ParseError(source, line_no, f"{key}: {exc}") from None
    try:
        return Config.from_flat(flat)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from None


def load_config(path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def dump_config(config: Config | Mapping[str, object]) -> str:
    flat = config.to_flat() if isinstance(config, Config) else dict(sorted(config.items()))
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flat.items())
