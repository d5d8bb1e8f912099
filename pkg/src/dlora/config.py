"""Run configuration: JSON file with exactly these fields, flags override."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import TASKS
from .model import ModelConfig

MODES = ("ft", "ek", "kr")
PEFT_KINDS = ("lora", "adapter")
POLICIES = ("skip_frozen", "compute_frozen_on_edge")
TRANSPORTS = ("local", "tcp")

# Deployment-only fields; they do not change what is computed and are left
# out of the metrics log header so local and tcp runs log identically.
DEPLOYMENT_FIELDS = ("transport", "host", "port", "output")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    peft: str = "lora"
    lora_rank: int = 4
    lora_alpha: float = 1.0
    adapter_dim: int = 16
    mode: str = "kr"
    budget: int = 4
    epochs: int = 4
    warmup_steps: int | None = None
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    quant_bits: int = 32
    frozen_policy: str = "skip_frozen"
    transport: str = "local"
    host: str = "127.0.0.1"
    port: int = 7431
    task: str = "copy"
    n_train: int = 256
    n_eval: int = 64
    segment_len: int = 8
    seed: int = 42
    backbone: str | None = None
    output: str | None = None

    def validate(self) -> "RunConfig":
        checks = [
            (self.peft in PEFT_KINDS, f"peft must be one of {PEFT_KINDS}"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.frozen_policy in POLICIES, f"frozen_policy must be one of {POLICIES}"),
            (self.transport in TRANSPORTS, f"transport must be one of {TRANSPORTS}"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (self.quant_bits in (8, 32), "quant_bits must be 8 or 32"),
            (self.budget >= 1, "budget must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.n_train >= self.batch_size, "n_train must hold at least one batch"),
            (self.n_eval >= 0, "n_eval must be >= 0"),
            (self.lora_rank >= 1 and self.adapter_dim >= 1, "PEFT dims must be >= 1"),
            (self.lr >= 0 and self.weight_decay >= 0, "lr and weight_decay must be >= 0"),
            (self.warmup_steps is None or self.warmup_steps >= 1, "warmup_steps must be >= 1"),
            (0 < self.port < 65536, "port out of range"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.task == "charlm":
            needed = self.model.max_seq
        else:
            needed = 2 * self.segment_len + 1
        if needed - 1 > self.model.max_seq:
            raise ConfigError(f"task sequences need {needed - 1} positions but max_seq is {self.model.max_seq}")
        return self

    @property
    def steps_per_epoch(self) -> int:
        return self.n_train // self.batch_size

    @property
    def pretune_steps(self) -> int:
        if self.mode == "ft":
            return 0
        return self.warmup_steps or self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.pretune_steps + self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def loggable(self) -> dict:
        d = self.to_dict()
        for key in DEPLOYMENT_FIELDS:
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        raw = dict(raw)
        model = raw.pop("model", {})
        if isinstance(model, dict):
            model_names = {f.name for f in dataclasses.fields(ModelConfig)}
            bad = set(model) - model_names
            if bad:
                raise ConfigError(f"unknown model fields: {sorted(bad)}")
            try:
                model = ModelConfig(**model)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from None
        return cls(model=model, **raw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        model_changes = {k[len("model."):]: v for k, v in changes.items() if k.startswith("model.")}
        rest = {k: v for k, v in changes.items() if not k.startswith("model.")}
        cfg = dataclasses.replace(self, **rest)
        if model_changes:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model_changes))
        return cfg
