"""Experiment configuration: flat `key = value` files with a closed schema.

Files use one dotted key per line, `#` comments, and may be overridden on
the command line with repeated `--set key=value` flags.  Unknown keys are
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .dtc import AblationSwitches, ReceptiveField
from .unet import UPSAMPLER_KINDS, UNetConfig


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable or out-of-range value."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_rf(text: str) -> ReceptiveField:
    return ReceptiveField.parse(text)


@dataclass
class ExperimentConfig:
    rank: int = 2
    extent: int = 64
    n_train: int = 200
    n_val: int = 50
    data_seed: int = 0
    clutter: float = 0.25
    noise_sigma: float = 0.05
    depth: int = 3
    base_channels: int = 8
    upsampler: str = "linear"
    r: ReceptiveField = ReceptiveField(1.0)
    use_weight: bool = True
    use_sigmoid: bool = True
    use_tanh: bool = True
    iters: int = 2000
    batch: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    val_every: int = 200
    nsd_tau: float = 1.0

    def validate(self) -> "ExperimentConfig":
        if self.rank not in (2, 3):
            raise ConfigError(f"data.rank must be 2 or 3, got {self.rank}")
        if self.upsampler not in UPSAMPLER_KINDS:
            raise ConfigError(
                f"model.upsampler must be one of {', '.join(UPSAMPLER_KINDS)}, got {self.upsampler!r}"
            )
        for key, value in (("train.iters", self.iters), ("data.n_train", self.n_train)):
            if value < 0:
                raise ConfigError(f"{key} must be >= 0, got {value}")
        if self.batch < 1 or self.val_every < 1:
            raise ConfigError("train.batch and train.val_every must be >= 1")
        try:
            self.switches()
            self.unet_config()
            self.dataset_spec()
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(str(e)) from e
        return self

    def switches(self) -> AblationSwitches:
        try:
            return AblationSwitches(self.use_weight, self.use_sigmoid, self.use_tanh)
        except ValueError as e:
            raise ConfigError(f"dtc switches: {e}") from e

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            spatial_rank=self.rank,
            extent=self.extent,
            depth=self.depth,
            base_channels=self.base_channels,
            upsampler=self.upsampler,
            r=self.r,
            switches=self.switches(),
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            rank=self.rank,
            extent=self.extent,
            n_train=self.n_train,
            n_val=self.n_val,
            seed=self.data_seed,
            clutter_level=self.clutter,
            noise_sigma=self.noise_sigma,
        )

    def text(self) -> str:
        lines = []
        for key, (attr, parse) in SCHEMA.items():
            value = getattr(self, attr)
            if parse is _parse_bool:
                value = "true" if value else "false"
            lines.append(f"{key} = {value}\n")
        return "".join(lines)


SCHEMA: dict[str, tuple[str, object]] = {
    "data.rank": ("rank", int),
    "data.extent": ("extent", int),
    "data.n_train": ("n_train", int),
    "data.n_val": ("n_val", int),
    "data.seed": ("data_seed", int),
    "data.clutter": ("clutter", float),
    "data.noise_sigma": ("noise_sigma", float),
    "model.depth": ("depth", int),
    "model.base_channels": ("base_channels", int),
    "model.upsampler": ("upsampler", str),
    "dtc.r": ("r", _parse_rf),
    "dtc.use_weight": ("use_weight", _parse_bool),
    "dtc.use_sigmoid": ("use_sigmoid", _parse_bool),
    "dtc.use_tanh": ("use_tanh", _parse_bool),
    "train.iters": ("iters", int),
    "train.batch": ("batch", int),
    "train.lr": ("lr", float),
    "train.weight_decay": ("weight_decay", float),
    "train.seed": ("seed", int),
    "train.val_every": ("val_every", int),
    "eval.nsd_tau": ("nsd_tau", float),
}


def _apply(cfg: ExperimentConfig, key: str, raw: str, where: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r} in {where}")
    attr, parse = SCHEMA[key]
    try:
        setattr(cfg, attr, parse(raw.strip()))
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e


def parse_config_lines(lines, where: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}:{lineno}: expected `key = value`, got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        _apply(cfg, key.strip(), raw, f"{where}:{lineno}")
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Config from an optional file plus `key=value` override strings."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        parse_config_lines(p.read_text().splitlines(), str(p), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply(cfg, key.strip(), raw, "--set")
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()
