"""Experiment configuration: flat ``key = value`` text with typed parsing.

Lists of layer indices accept ``0-5``, ``0,2,4`` or an empty value. Unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelDims

FREEZE_GROUPS = ("gate", "routed", "shared")


@dataclass
class ExperimentConfig:
    seed: int = 0
    protocol: str = "p1"
    n_train: int = 1200
    n_dev: int = 300
    n_test: int = 600
    held_out: tuple[int, ...] = ()

    # model
    image_size: int = 32
    patch: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    embed_dim: int = 32
    text_dim: int = 64
    text_heads: int = 4
    text_depth: int = 2
    max_len: int = 32
    head: str = "contrastive"

    # shared unified experts
    image_sue_layers: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    text_sue_layers: tuple[int, ...] = ()
    n_experts: int = 4
    k: int = 2
    shared_expert: bool = True
    renormalize_topk: bool = True
    zero_routed_init: bool = False
    freeze: tuple[str, ...] = ()

    # loss
    alpha: float = 1.0
    beta: float = 1e-3
    gamma: float = 1e-2
    symmetric_loss: bool = False

    # optimisation (published setting used lr 1e-6 on a pretrained full-size backbone)
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    lr_schedule: str = "cosine"
    lr_warmup_steps: int = 38
    hflip: bool = True
    epochs: int = 15  # total, warm-up included
    warmup_epochs: int = 5
    batch_size: int = 32

    # evaluation
    threshold_rule: str = "fixed"
    threshold: float = 0.5
    select_best: bool = True

    prompt_bank: str = ""
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        from .data import PROTOCOLS  # local import: data imports text only

        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        for name, layers, depth in (
            ("image_sue_layers", self.image_sue_layers, self.depth),
            ("text_sue_layers", self.text_sue_layers, self.text_depth),
        ):
            bad = [i for i in layers if not 0 <= i < depth]
            if bad:
                raise ConfigError(f"{name} {bad} outside encoder depth {depth}")
            if len(set(layers)) != len(layers):
                raise ConfigError(f"{name} has duplicate indices")
        if self.head == "linear" and self.text_sue_layers:
            raise ConfigError("the linear-head classifier has no text branch")
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"k={self.k} must satisfy 1 <= k <= n_experts={self.n_experts}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss coefficients must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.threshold_rule not in ("fixed", "dev_eer"):
            raise ConfigError(f"threshold_rule must be 'fixed' or 'dev_eer', got {self.threshold_rule!r}")
        unknown = set(self.freeze) - set(FREEZE_GROUPS)
        if unknown:
            raise ConfigError(f"unknown freeze groups {sorted(unknown)}")
        self.model_dims().validate()

    def model_dims(self) -> ModelDims:
        names = {f.name for f in fields(ModelDims)}
        return ModelDims(**{n: getattr(self, n) for n in names if hasattr(self, n)})

    @property
    def has_sue(self) -> bool:
        return bool(self.image_sue_layers or self.text_sue_layers)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in filter(None, (p.strip() for p in raw.replace(" ", "").split(","))):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _coerce(name: str, annotation: str, raw: str):
    raw = raw.strip()
    try:
        if annotation == "int":
            return int(raw, 0)
        if annotation == "float":
            return float(raw)
        if annotation == "bool":
            return _parse_bool(raw)
        if annotation == "tuple[int, ...]":
            return _parse_int_list(raw)
        if annotation == "tuple[str, ...]":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, types[key], value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)

