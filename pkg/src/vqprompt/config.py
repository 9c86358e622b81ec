"""Experiment configuration: sectioned key/value files, parsed fail-closed.

Files use INI sections ``[data]``, ``[backbone]``, ``[prompt]``,
``[train]`` and ``[ablation]``. Every field has a default except the
mandatory ``train.seed``; unknown sections or keys are rejected. A
normalized snapshot of the effective configuration is written into every
run directory so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ContractError
from .prompting import LossWeights
from .training import TrainConfig

RUN_MODES = ("vq", "vq-s", "soft", "none")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ContractError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


@dataclass
class DataSection:
    tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 100
    noise_scale: float = 0.5
    pretrain_classes: int = 10
    pretrain_samples_per_class: int = 200
    tokens_per_sample: int = 16
    token_dim: int = 32


@dataclass
class BackboneSection:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    prompt_blocks: tuple[int, ...] = (0, 1)
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32


@dataclass
class PromptSection:
    pool_size: int = 10
    prompt_length: int = 8
    temperature: float = 1.0


@dataclass
class TrainSection:
    seed: int = None  # type: ignore[assignment]  # mandatory
    mode: str = "vq"
    learning_rate: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 16
    calibration_epochs: int = 10
    calibration_lr: float = 0.01
    calibration_batch_size: int = 64
    pseudo_per_class: int = 64
    lambda_q: float = 0.4
    lambda_c: float = 0.1


@dataclass
class AblationSection:
    lambda_q_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.8)
    lambda_c_grid: tuple[float, ...] = (0.0, 0.1, 0.4)
    pool_size_grid: tuple[int, ...] = (4, 10, 30)
    prompt_length_grid: tuple[int, ...] = (4, 8, 16)


_SECTIONS = {
    "data": DataSection,
    "backbone": BackboneSection,
    "prompt": PromptSection,
    "train": TrainSection,
    "ablation": AblationSection,
}

_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
}

# tuple-typed fields need explicit parser names
_TUPLE_FIELDS = {
    ("backbone", "prompt_blocks"): "int_list",
    ("ablation", "lambda_q_grid"): "float_list",
    ("ablation", "lambda_c_grid"): "float_list",
    ("ablation", "pool_size_grid"): "int_list",
    ("ablation", "prompt_length_grid"): "int_list",
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> None:
        if self.train.seed is None:
            raise ContractError("train.seed is mandatory (set it in the config or via --seed)")
        if self.train.mode not in RUN_MODES:
            raise ContractError(
                f"train.mode must be one of {RUN_MODES}, got {self.train.mode!r}"
            )

    @property
    def seq_len(self) -> int:
        return self.data.tokens_per_sample + 1

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            depth=self.backbone.depth,
            embed_dim=self.backbone.embed_dim,
            heads=self.backbone.heads,
            seq_len=self.seq_len,
            ff_dim=self.backbone.ff_dim,
            token_dim=self.data.token_dim,
            prompt_blocks=self.backbone.prompt_blocks,
        )

    def train_config(self, mode_override: str | None = None) -> TrainConfig:
        """Map the run mode onto the core mode plus the calibration flag."""
        mode = mode_override or self.train.mode
        if mode not in RUN_MODES:
            raise ContractError(f"mode must be one of {RUN_MODES}, got {mode!r}")
        core_mode = "vq" if mode in ("vq", "vq-s") else mode
        calibrate = mode == "vq"
        return TrainConfig(
            seed=self.train.seed,
            mode=core_mode,
            calibrate=calibrate,
            learning_rate=self.train.learning_rate,
            beta1=self.train.beta1,
            beta2=self.train.beta2,
            adam_eps=self.train.adam_eps,
            weight_decay=self.train.weight_decay,
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            calibration_epochs=self.train.calibration_epochs,
            calibration_lr=self.train.calibration_lr,
            calibration_batch_size=self.train.calibration_batch_size,
            pseudo_per_class=self.train.pseudo_per_class,
            temperature=self.prompt.temperature,
            weights=LossWeights(self.train.lambda_q, self.train.lambda_c),
        )


def _parser_for(section_name: str, key: str, current_value):
    if (section_name, key) in _TUPLE_FIELDS:
        return _PARSERS[_TUPLE_FIELDS[(section_name, key)]]
    if current_value is None:  # only train.seed defaults to None
        return int
    if isinstance(current_value, bool):
        return _parse_bool
    return type(current_value)


def _assign(config: ExperimentConfig, section_name: str, key: str, text: str) -> None:
    if section_name not in _SECTIONS:
        raise ContractError(
            f"unknown config section [{section_name}]; "
            f"expected one of {sorted(_SECTIONS)}"
        )
    section_obj = getattr(config, section_name)
    if key not in {f.name for f in fields(section_obj)}:
        raise ContractError(f"unknown key {key!r} in section [{section_name}]")
    parser = _parser_for(section_name, key, getattr(section_obj, key))
    try:
        value = parser(text)
    except (ValueError, TypeError) as exc:
        raise ContractError(
            f"bad value for [{section_name}] {key}: {text!r} ({exc})"
        ) from exc
    setattr(section_obj, key, value)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file; reject unknown sections/keys; apply overrides.

    ``overrides`` maps dotted names (``train.seed``) to raw string values.
    """
    config = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive
        read = parser.read(path)
        if not read:
            raise ContractError(f"config file {path} not found or unreadable")
        for section_name in parser.sections():
            for key, value in parser.items(section_name):
                _assign(config, section_name, key, value)
    if overrides:
        for dotted, value in overrides.items():
            if value is None:
                continue
            section_name, _, key = dotted.partition(".")
            _assign(config, section_name, key, str(value))
    config.validate()
    return config


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(path, config: ExperimentConfig) -> None:
    """Emit the effective configuration as a normalized, re-loadable file."""
    lines = []
    for section_name in _SECTIONS:
        section_obj = getattr(config, section_name)
        lines.append(f"[{section_name}]")
        for f in fields(section_obj):
            lines.append(f"{f.name} = {_format_value(getattr(section_obj, f.name))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
