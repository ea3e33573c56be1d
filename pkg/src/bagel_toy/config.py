"""Run configuration: INI file with ``[model]``, ``[train]`` and ``[run]`` sections plus overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigurationError
from .model import ModelConfig, Variant
from .trainer import TrainConfig, parse_mixture

SEED_ENV = "BAGEL_TOY_SEED"
ALIASES = {"steps": "train.total_steps", "variant": "model.variant", "seed": "train.seed"}


@dataclass
class RunOptions:
    out_dir: str = "runs/default"
    ema_every: int = 0
    eval: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {k: _fmt(v) for k, v in self.model.to_dict().items()}
        cp["train"] = {k: _fmt(v) for k, v in self.train.to_dict().items()}
        cp["run"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.run).items()}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini())
        return path


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "run": RunOptions}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, dict):
        return ",".join(f"{k}:{x}" for k, x in v.items())
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(cls, key: str, raw: str):
    f = {x.name: x for x in dataclasses.fields(cls)}[key]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    raw = raw.strip()
    if key == "warmup_steps":
        return None if raw.lower() in ("", "none", "auto") else int(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, Variant):
        return Variant.parse(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(default, dict):
        return parse_mixture(raw)
    return raw


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[(\w+)\]", line)
        if m:
            current = m.group(1)
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return n
    return None


def _resolve_key(key: str) -> tuple[str, str]:
    key = key.replace("-", "_")
    key = ALIASES.get(key, key)
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        return section, name
    hits = [s for s, cls in SECTIONS.items() if key in {f.name for f in dataclasses.fields(cls)}]
    if not hits:
        raise ConfigurationError(f"unknown config key {key!r}")
    return hits[0], key


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Merge defaults, the INI file and ``overrides``; the seed falls back to ``BAGEL_TOY_SEED``."""
    env = os.environ if env is None else env
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigurationError(f"{path}:{_line_of_section(text, section)}: unknown section [{section}]")
            names = {f.name for f in dataclasses.fields(SECTIONS[section])}
            for key, raw in cp[section].items():
                where = f"{path}:{_line_of(text, section, key) or '?'}"
                if key not in names:
                    raise ConfigurationError(f"{where}: unknown key {section}.{key}")
                try:
                    values[section][key] = _coerce(SECTIONS[section], key, raw)
                except (ValueError, ConfigurationError) as exc:
                    raise ConfigurationError(f"{where}: bad value for {section}.{key}: {exc}") from None
    for key, raw in (overrides or {}).items():
        section, name = _resolve_key(key)
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigurationError(f"unknown config key {section}.{name}")
        try:
            values[section][name] = _coerce(SECTIONS[section], name, str(raw))
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"bad value for --{key}: {exc}") from None
    if "seed" not in values["train"] and env.get(SEED_ENV):
        try:
            values["train"]["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from None
    try:
        return RunConfig(ModelConfig(**values["model"]), TrainConfig(**values["train"]),
                         RunOptions(**values["run"]))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def _line_of_section(text: str, section: str) -> int | str:
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{section}]":
            return n
    return "?"


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``["--lr", "1e-3", "--model.layers=3"]`` -> ``{"lr": "1e-3", "model.layers": "3"}``."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigurationError(f"missing value for {tok}")
            val = tokens[i + 1]
            i += 2
        out[key] = val
    return out
