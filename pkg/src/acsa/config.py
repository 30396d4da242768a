"""Run configuration: INI-style file with sections, overridable per key."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .model import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training recipe
    lambda_l2: float = 0.01
    alpha_sc: float = 1.0
    learning_rate: float = 0.001
    clip_norm: float = 5.0
    global_clip: bool = False
    dropout_p: float = 0.5
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    tau: float = 0.25
    runs: int = 3
    val_ratio: float = 0.9
    # model
    variant: str = "full"
    d_w: int = 300
    d_s: int = 100
    hidden: int = 100
    attn_dim: int = 0  # 0 means "same as the input dimension"
    freeze_embeddings: bool = False
    # data
    train_path: str = ""
    test_path: str = ""
    data_format: str = ""  # xml or jsonl; empty infers from the file suffix
    labels_path: str = ""
    embeddings_path: str = ""
    tokenizer: str = "whitespace_punct"
    min_count: int = 1
    out_dir: str = "runs"

    def train_config(self):
        from .training import TrainConfig

        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self, check_files: bool = True):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.data_format not in ("", "xml", "jsonl"):
            raise ConfigError(f"data_format must be xml or jsonl, got {self.data_format!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if check_files:
            for key in ("train_path", "test_path", "labels_path", "embeddings_path"):
                value = getattr(self, key)
                if value and not Path(value).is_file():
                    raise ConfigError(f"{key}: file not found: {value}")
        return self


SECTIONS = {
    "train": ("lambda_l2", "alpha_sc", "learning_rate", "clip_norm", "global_clip", "dropout_p", "batch_size",
              "max_epochs", "patience", "seed", "tau", "runs", "val_ratio"),
    "model": ("variant", "d_w", "d_s", "hidden", "attn_dim", "freeze_embeddings"),
    "data": ("train_path", "test_path", "data_format", "labels_path", "embeddings_path", "tokenizer", "min_count",
             "out_dir"),
}
_TYPES = typing.get_type_hints(RunConfig)


def _convert(key, raw):
    typ = _TYPES[key]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {text!r}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from defaults, an optional file, then overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
                values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values)


def dump_config(config: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {getattr(config, k)}" for k in keys]
        lines.append("")
    return "\n".join(lines)
