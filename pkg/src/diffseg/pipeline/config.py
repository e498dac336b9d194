"""Run configuration and its flat ``key = value`` file format.

Blank lines and lines starting with ``#`` are ignored.  Values are parsed by
the type of the matching :class:`RunConfig` field; booleans accept
true/false/yes/no/1/0.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..schedule import build_linear_schedule
from ..seglosses import LOSSES, FocalConfig, MultiLossConfig, SSLossConfig
from ..unet import PRESETS

STAGES = ("pretrain", "finetune", "evaluate", "sample", "synth")
SCHEDULE_KEYS = ("T", "beta_start", "beta_end", "p2_k", "p2_gamma")
DEFAULT_EPOCHS = {"pretrain": 100, "finetune": 150}


@dataclass
class RunConfig:
    stage: str = "pretrain"
    run_id: str = "run"
    seed: int = 0
    # model
    preset: str = "small"
    attention_levels: str = ""
    head_scope: str = "projection"
    # diffusion schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p2_k: float = 1.0
    p2_gamma: float = 1.0
    # segmentation loss
    loss: str = "ssfl"
    lambda_fl: float = 1.0
    ss_c1: float = 0.01
    ss_beta: float = 0.1
    focal_gamma: float = 2.0
    ss_weighting: str = "pixel"
    ss_emax_scope: str = "batch"
    # optimisation
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 0
    augment: bool = True
    # data
    manifest: str = ""
    num_classes: int = 3
    max_train_patches: int = 0
    max_test_patches: int = 0
    # checkpoints and outputs
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    out_dir: str = ""
    metrics_csv: str = ""
    random_init: bool = False
    selection: str = "test"
    n_samples: int = 16
    save_predictions: bool = False
    explicit: frozenset = field(default=frozenset(), repr=False, compare=False)

    def __post_init__(self):
        if self.epochs == 0:
            self.epochs = DEFAULT_EPOCHS.get(self.stage, 1)
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage: must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: must be one of {LOSSES}")
        if self.selection not in ("test", "validation"):
            raise ConfigError("selection: must be 'test' or 'validation'")
        try:
            self.loss_config()
            build_linear_schedule(1, self.beta_start, self.beta_end, self.p2_k, self.p2_gamma)
        except ConfigError as exc:
            raise ConfigError(f"invalid loss/schedule parameters: {exc}") from None
        if self.T < 1:
            raise ConfigError("T: must be >= 1")

    # -- derived objects ---------------------------------------------------
    def schedule(self):
        return build_linear_schedule(self.T, self.beta_start, self.beta_end, self.p2_k,
                                     self.p2_gamma)

    def loss_config(self) -> MultiLossConfig:
        return MultiLossConfig(
            lambda_fl=self.lambda_fl,
            ss=SSLossConfig(c1=self.ss_c1, beta_frac=self.ss_beta,
                            weighting_mode=self.ss_weighting, emax_scope=self.ss_emax_scope),
            fl=FocalConfig(gamma_fl=self.focal_gamma),
        )

    def attention(self) -> tuple[int, ...] | None:
        if not self.attention_levels.strip():
            return None
        return tuple(int(v) for v in self.attention_levels.split(","))

    def output_dir(self) -> Path:
        return Path(self.out_dir or os.path.join("runs", self.run_id))

    def replace(self, **changes) -> RunConfig:
        explicit = self.explicit | frozenset(changes)
        return dataclasses.replace(self, explicit=explicit, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "explicit":
                continue
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig) if f.name != "explicit"}


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    for key, val in overrides.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return RunConfig(**values, explicit=frozenset(values))
