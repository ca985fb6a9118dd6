"""Run configuration: one YAML file with a section per stage, plus overrides.

Overrides use dotted keys, e.g. ``train.epochs=3`` or ``seed=7``; values
are parsed as YAML scalars or lists.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .channel import RATIO_GRID
from .controller import ALPHA_GRID, HORIZON, MU_GRID, RHO_TH_GRID, SNR_BINS, V_GRID, WINDOW
from .data import ToyDatasetSpec
from .trainer import TrainConfig
from .vit import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    snr_bins: tuple[float, ...] = SNR_BINS
    V_grid: tuple[float, ...] = V_GRID
    mu_grid: tuple[float, ...] = MU_GRID
    rho_th_grid: tuple[float, ...] = RHO_TH_GRID
    horizon: int = HORIZON
    window: int = WINDOW
    snr_mean: float = 10.0
    snr_std: float = 2.5
    runs: int | None = None  # None: 5 for a random SNR process, 1 for a constant one
    regime: str = "robust"  # which trained model feeds the accuracy table


@dataclass(frozen=True)
class BaselineConfig:
    schemes: tuple[str, ...] = ("resize", "codec")
    rhos: tuple[float, ...] = (0.0025, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    snrs: tuple[float, ...] = (0.0, 10.0, 20.0)


@dataclass(frozen=True)
class EvalConfig:
    snrs: tuple[float, ...] = (-10.0, 0.0, 10.0, 20.0)
    alpha_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    regimes: tuple[str, ...] = ("robust", "noiseless")
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if tuple(self.train.ratios) != tuple(sorted(set(self.train.ratios))):
            raise ConfigError("train.ratios must be strictly increasing")
        if self.model.num_classes != self.data.num_classes:
            raise ConfigError("model.num_classes must equal data.num_classes")
        shape = (self.data.channels, self.data.height, self.data.width)
        if shape != (self.model.channels, self.model.height, self.model.width):
            raise ConfigError(f"model input {self.model.channels}x{self.model.height}x{self.model.width} "
                              f"does not match the dataset {shape}")
        if self.controller.regime not in self.regimes:
            raise ConfigError(f"controller.regime {self.controller.regime!r} is not among the trained regimes")

    @property
    def paths(self) -> RunPaths:
        return RunPaths(Path(self.out_dir))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def regime(self, name: str) -> Path:
        return self.root / name

    @property
    def backbone(self) -> Path:
        return self.root / "backbone" / "backbone.ckpt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


# profiles ---------------------------------------------------------------------------

# desk-scale model used by the acceptance suite: 4x4 patches of 8x8 pixels
REFERENCE_MODEL = dict(patch=8, dim=32, heads=2, head_dim_k=16, head_dim_v=16,
                       depth=6, split=3, ffn_dim=128)

PROFILES = {
    "reference": dict(
        data=dict(per_class=300),
        model=REFERENCE_MODEL,
        train=dict(pretrain_epochs=30, epochs=30, batch_size=32, lambda_s=10.0),
    ),
    "smoke": dict(
        data=dict(per_class=20),
        model=dict(patch=8, dim=16, heads=2, head_dim_k=8, head_dim_v=8, depth=4, split=2, ffn_dim=32),
        train=dict(pretrain_epochs=2, epochs=2, batch_size=32, codec_warmup_epochs=1),
        controller=dict(horizon=2000, window=200, V_grid=[10.0, 100.0], mu_grid=[10.0], runs=1,
                        snr_bins=[-10.0, 0.0, 10.0, 20.0]),
        baseline=dict(rhos=[0.01, 0.1, 1.0], snrs=[10.0]),
        eval=dict(snrs=[0.0, 10.0], alpha_grid=[0.5, 1.0]),
    ),
}

_SECTIONS = {
    "data": ToyDatasetSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "controller": ControllerConfig,
    "baseline": BaselineConfig,
    "eval": EvalConfig,
}


def _coerce(cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for key, value in values.items():
        out[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _numbers(value):
    """YAML 1.1 reads ``1e-3`` (no dot) as a string; turn such strings into floats."""
    if isinstance(value, dict):
        return {k: _numbers(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_numbers(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def parse_overrides(items) -> dict:
    """``["train.epochs=3", "seed=1"]`` -> nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = _numbers(yaml.safe_load(raw))
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def build_config(raw: dict) -> RunConfig:
    raw = dict(raw)
    unknown = set(raw) - {"seed", "out_dir", "regimes", "profile", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    profile = raw.pop("profile", None)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        raw = _merge(PROFILES[profile], raw)
    seed = int(raw.get("seed", 0))
    sections = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name) or {})
        if name in ("data", "train"):
            values.setdefault("seed", seed)
        sections[name] = _coerce(cls, values)
    regimes = tuple(raw.get("regimes", ("robust", "noiseless")))
    try:
        return RunConfig(seed=seed, out_dir=str(raw.get("out_dir", "runs/default")),
                         regimes=regimes, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=None, profile: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = _numbers(yaml.safe_load(Path(path).read_text()) or {})
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if profile is not None:
        raw.setdefault("profile", profile)
    return build_config(_merge(raw, parse_overrides(overrides)))


def config_text(config: RunConfig) -> str:
    return yaml.safe_dump(_plain(config.to_dict()), sort_keys=True)


def dump_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(config_text(config))
    return path


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def with_regime(config: RunConfig, regime: str) -> TrainConfig:
    return replace(config.train, regime=regime)
