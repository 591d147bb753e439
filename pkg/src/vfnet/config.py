"""Flat ``key = value`` experiment configs with dotted sections.

::

    # comment
    data.dir = patches
    data.points = 512
    train.epochs = 300
    model.latent_dim = 8
    model.decoder_widths = 128, 128
    output.dir = runs/toy

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, PreconditionError
from .model import ModelConfig
from .training import TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_DATA_KEYS = {"dir", "points"}
_OUTPUT_KEYS = {"dir"}
_PATH_KEYS = {"data.dir", "output.dir"}


@dataclass
class ExperimentConfig:
    data_dir: Path | None = None
    points: int = 512
    output_dir: Path | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_lines(self) -> list[str]:
        """Fully resolved config in the same key = value format."""
        out = []
        if self.data_dir is not None:
            out.append(f"data.dir = {self.data_dir}")
        out.append(f"data.points = {self.points}")
        if self.output_dir is not None:
            out.append(f"output.dir = {self.output_dir}")
        for k, v in sorted(self.train.to_dict().items()):
            if k != "model":
                out.append(f"train.{k} = {_fmt(v)}")
        for k, v in sorted(self.train.model.to_dict().items()):
            out.append(f"model.{k} = {_fmt(v)}")
        return out

    def dump(self, path: str | os.PathLike):
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(key: str, raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        if hint in (int, "int") or (origin is typing.Union and int in args) or args == (int, type(None)):
            if raw.lower() in ("none", ""):
                return None
            return int(raw)
        if hint in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    base_dir = base_dir or Path.cwd()
    train_hints = typing.get_type_hints(TrainConfig)
    model_hints = typing.get_type_hints(ModelConfig)
    train_kw, model_kw = {}, {}
    cfg = ExperimentConfig()
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section == "train" and name in _TRAIN_KEYS:
            train_kw[name] = _convert(key, raw, train_hints[name])
        elif section == "model" and name in _MODEL_KEYS:
            model_kw[name] = _convert(key, raw, model_hints[name])
        elif section == "data" and name in _DATA_KEYS:
            if name == "dir":
                cfg.data_dir = (base_dir / raw).resolve()
            else:
                cfg.points = _convert(key, raw, int)
        elif section == "output" and name in _OUTPUT_KEYS:
            cfg.output_dir = (base_dir / raw).resolve()
        else:
            raise ConfigError(key, "unknown config key")
    try:
        model = ModelConfig(**model_kw)
        cfg.train = TrainConfig(model=model, **train_kw)
    except PreconditionError as e:
        raise ConfigError("train" if train_kw else "model", str(e)) from None
    if cfg.points < 1:
        raise ConfigError("data.points", "must be >= 1")
    return cfg


def load_config(path: str | os.PathLike, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    pairs = parse_pairs(text, str(path))
    for key, value in (overrides or {}).items():
        # command-line paths are relative to the working directory, not the config file
        pairs[key] = str(Path(value).resolve()) if key in _PATH_KEYS else value
    return build_config(pairs, path.parent)
