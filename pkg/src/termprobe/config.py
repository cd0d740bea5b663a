"""Engine configuration: one flat, versioned key-value file shared by every subcommand."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

CONFIG_VERSION = 1
SECTION = "engine"


class ConfigFileError(ValueError):
    pass


@dataclass
class EngineConfig:
    # model
    embed_dim: int = 64
    heads: int = 8
    dropout_p: float = 0.1
    pooling_epsilon: float = 1e-6
    seed: int = 0
    # toy encoder
    vocab_size: int = 500
    noise_sigma: float = 0.1
    filler_rate: float = 0.3
    # training
    batch_size: int = 32
    max_bank_per_batch: int = 100
    peak_lr: float = 1e-4
    init_lr: float = 1e-7
    warmup_steps: int = 500
    max_epochs: int = 50
    total_steps: int = 0  # 0: derive from max_epochs
    # paths
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    reports_dir: str = "reports"

    def __post_init__(self):
        if self.embed_dim <= 0 or self.heads <= 0:
            raise ConfigFileError("embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigFileError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not self.pooling_epsilon > 0:
            raise ConfigFileError("pooling_epsilon must be > 0")
        if not 0 <= self.dropout_p < 1:
            raise ConfigFileError("dropout_p must lie in [0, 1)")

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def dumps(self) -> str:
        lines = [f"[{SECTION}]", f"version = {CONFIG_VERSION}"]
        lines += [f"{f.name} = {getattr(self, f.name)!r}" if f.type == "float" else
                  f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "EngineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigFileError(f"{source}: {exc}") from exc
        if not cp.has_section(SECTION):
            raise ConfigFileError(f"{source}: missing [{SECTION}] section")
        raw = dict(cp[SECTION])
        version = raw.pop("version", None)
        if version is None:
            raise ConfigFileError(f"{source}: missing version key")
        if version.strip() != str(CONFIG_VERSION):
            raise ConfigFileError(f"{source}: unsupported config version {version}")
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ConfigFileError(f"{source}: unknown keys {sorted(unknown)}")
        conv = {"int": int, "float": float, "str": str}
        values = {}
        for key, val in raw.items():
            try:
                values[key] = conv[types[key]](val)
            except ValueError as exc:
                raise ConfigFileError(f"{source}: bad value for {key}: {val!r}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "EngineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigFileError(f"config file {path} does not exist")
        return cls.loads(path.read_text(), str(path))
