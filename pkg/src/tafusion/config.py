"""Run configuration: an INI file layered over defaults, with flags layered over the file.

Sections are ``[data]`` (cohort generator), ``[model]`` (sizes), ``[pretrain]``,
``[fusion]``, ``[end_to_end]`` (training budgets) and ``[eval]``.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .evaluation.experiment import ModelConfig
from .evaluation.training import TrainConfig
from .synthdata import CohortConfig


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 5
    n_perm: int = 1000
    missing_intervals: int = 8
    variants: tuple[str, ...] = ("full", "no_pretrain", "no_biattention", "no_shared")

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"need at least 2 folds, got {self.folds}")


@dataclass(frozen=True)
class RunConfig:
    data: CohortConfig = field(default_factory=CohortConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        m = dataclasses.asdict(self.model)
        return {"seed": self.seed, "data": self.data.to_dict(), "model": m,
                "eval": {**dataclasses.asdict(self.eval), "variants": list(self.eval.variants)}}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            m = dict(d["model"])
            for b in ("pretrain", "fusion", "end_to_end"):
                m[b] = TrainConfig(**m[b])
            ev = dict(d["eval"])
            ev["variants"] = tuple(ev["variants"])
            return cls(CohortConfig.from_dict(d["data"]), ModelConfig(**m), EvalConfig(**ev),
                       int(d["seed"]))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"stored run config is incomplete: {e}") from None

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _convert(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or default is None:
            if raw.strip().lower() in ("", "none"):
                return None
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], str):
                return tuple(parts)
            return tuple(float(p) for p in parts)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _apply(obj, section: str, items: dict[str, str]):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in known or isinstance(getattr(obj, key), TrainConfig):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[key] = _convert(section, key, raw, getattr(obj, key))
    return replace(obj, **changes) if changes else obj


_SECTIONS = ("data", "model", "pretrain", "fusion", "end_to_end", "eval", "run")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    for s in cp.sections():
        if s not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{s}]")
    cfg = RunConfig()
    sec = {s: dict(cp[s]) for s in cp.sections()}
    data = _apply(cfg.data, "data", sec.get("data", {}))
    model = _apply(cfg.model, "model", sec.get("model", {}))
    budgets = {b: _apply(getattr(model, b), b, sec.get(b, {}))
               for b in ("pretrain", "fusion", "end_to_end")}
    model = replace(model, **budgets)
    ev = _apply(cfg.eval, "eval", sec.get("eval", {}))
    seed = cfg.seed
    if "run" in sec:
        extra = set(sec["run"]) - {"seed"}
        if extra:
            raise ConfigError(f"[run] unknown key {sorted(extra)[0]!r}")
        seed = _convert("run", "seed", sec["run"].get("seed", "0"), 0)
    return RunConfig(data, model, ev, seed)


def load_config(path: str | Path | None) -> tuple[RunConfig, str]:
    """The parsed config and the file text that produced it ("" for defaults)."""
    if path is None:
        return RunConfig(), ""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return parse_config(text, str(p)), text


def with_overrides(cfg: RunConfig, seed: int | None = None, task: str | None = None) -> RunConfig:
    """Flag values win over the file; the run seed also seeds the generator."""
    data = cfg.data
    if task is not None:
        data = replace(data, task=task)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
        data = replace(data, seed=seed)
    return replace(cfg, data=data)
