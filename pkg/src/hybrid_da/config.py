"""TOML experiment configuration.

Every section maps onto a frozen dataclass; unknown sections or keys are
errors. Missing keys take the defaults below, which describe the standard
desk-scale twin experiment.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .assim import CovSpec, MinimizerConfig, ObsConfig
from .diag import SignificanceConfig
from .dyn import ModelConfig
from .net import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    N: int = 36
    J: int = 10
    F: float = 10.0
    h: float = 1.0
    c: float = 10.0
    b: float = 10.0
    dt: float = 0.005
    steps_per_window: int = 10
    halfwidth: int = 0
    t_cycle_windows: int = 2
    forcing_scale: float | None = None


@dataclass(frozen=True)
class TruthSection:
    spinup_steps: int = 2000
    train_windows: int = 2000
    eval_windows: int = 500


@dataclass(frozen=True)
class ObservationSection:
    times: tuple[int, ...] = (0, 2, 4, 6, 8)
    site_stride: int = 1
    sigma: float = 0.5


@dataclass(frozen=True)
class CovarianceSection:
    sigma_b: float = 0.15
    length_scale: float = 0.5
    p: float = 0.03
    sigma_init: float = 0.3


@dataclass(frozen=True)
class MinimizerSection:
    n_outer: int = 3
    max_inner: int = 50
    inner_tol: float = 1e-6


@dataclass(frozen=True)
class NetworkSection:
    hidden: tuple[int, ...] = (32, 32)
    scratch_out_std: float = 0.1


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 1000
    dropout: float = 0.1
    patience: int = 20


@dataclass(frozen=True)
class DatasetSection:
    mode: str = "prediction"
    windows_per_day: int = 2
    train_fraction: float = 0.8


@dataclass(frozen=True)
class OnlineSection:
    pretrained: str = ""
    p_scratch: float | None = None
    scratch_windows: int = 0


@dataclass(frozen=True)
class DiagnosticsSection:
    leads: tuple[int, ...] = (1, 2, 4, 8)
    case_stride: int = 1
    level: float = 0.95
    inflation: float = 1.25
    n_tests: int = 1
    final_fraction: float = 1.0 / 3.0


@dataclass(frozen=True)
class SweepSection:
    sizes: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0)
    strategy: str = "old-and-new"
    truncations: tuple[int, ...] = (4, 8, 17)
    resolution_halfwidth: int = 1
    p_values: tuple[float, ...] = (0.1, 0.03, 0.01)
    p_windows: int = 500


@dataclass(frozen=True)
class SeedSection:
    base: int = 0


@dataclass(frozen=True)
class OutputSection:
    dir: str = ""


SECTIONS = {
    "model": ModelSection, "truth": TruthSection, "observations": ObservationSection,
    "covariance": CovarianceSection, "minimizer": MinimizerSection, "network": NetworkSection,
    "training": TrainingSection, "dataset": DatasetSection, "online": OnlineSection,
    "diagnostics": DiagnosticsSection, "sweep": SweepSection, "seeds": SeedSection, "output": OutputSection,
}

# offsets from the base seed for each random stream
SEED_OFFSETS = {"truth": 1, "observations": 2, "background": 3, "network": 4, "training": 5, "scratch": 6}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    truth: TruthSection = field(default_factory=TruthSection)
    observations: ObservationSection = field(default_factory=ObservationSection)
    covariance: CovarianceSection = field(default_factory=CovarianceSection)
    minimizer: MinimizerSection = field(default_factory=MinimizerSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- derived objects ----------------------------------------------------

    def seed(self, stream: str) -> int:
        return self.seeds.base * 100 + SEED_OFFSETS[stream]

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.N, m.J, m.F, m.h, m.c, m.b, m.dt, m.steps_per_window)

    def obs_config(self) -> ObsConfig:
        o = self.observations
        return ObsConfig(tuple(o.times), tuple(range(0, self.model.N, o.site_stride)), o.sigma)

    def cov_spec(self, p: float | None = None) -> CovSpec:
        c = self.covariance
        return CovSpec(self.model.N, c.sigma_b, c.length_scale, c.p if p is None else p)

    def minimizer_config(self) -> MinimizerConfig:
        m = self.minimizer
        return MinimizerConfig(m.n_outer, m.max_inner, m.inner_tol)

    def train_config(self, seed_shift: int = 0) -> TrainConfig:
        t = self.training
        return TrainConfig(t.learning_rate, t.batch_size, t.max_epochs, t.dropout, t.patience,
                           self.seed("training") + seed_shift)

    def significance_config(self) -> SignificanceConfig:
        d = self.diagnostics
        return SignificanceConfig(d.level, d.inflation, d.n_tests)

    def layer_dims(self, halfwidth: int | None = None) -> list[int]:
        hw = self.model.halfwidth if halfwidth is None else halfwidth
        return [2 * hw + 1 + 4, *self.network.hidden, 1]

    def output_dir(self, override: str | None = None) -> Path:
        if override:
            return Path(override)
        if self.output.dir:
            return Path(self.output.dir)
        return Path(os.environ.get("HDA_DATA_DIR", "hda_output"))

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def with_seed(self, base: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=SeedSection(base))

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        default = known[key].default
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"[{name}] {key} must be an array")
            value = tuple(value)
        elif isinstance(default, bool) or isinstance(value, bool):
            raise ConfigError(f"[{name}] {key} has unexpected boolean value")
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        elif default is not None and not isinstance(value, type(default)):
            raise ConfigError(f"[{name}] {key} must be {type(default).__name__}, got {type(value).__name__}")
        values[key] = value
    return cls(**values)


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, SECTIONS[name], data[name]) for name in data}
    cfg = ExperimentConfig(**sections)
    pretrained = cfg.online.pretrained
    if pretrained:
        path = Path(pretrained)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"[online] pretrained file {path} does not exist")
        cfg = cfg.replace("online", pretrained=str(path))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, path.parent)


def validate(cfg: ExperimentConfig) -> None:
    """Check cross-field constraints by building every derived object."""
    try:
        mc = cfg.model_config()
        cfg.obs_config().validate(mc.N, mc.steps_per_window)
        cfg.cov_spec()
        cfg.minimizer_config()
        cfg.train_config()
        cfg.significance_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.dataset.mode not in ("prediction", "post-processing"):
        raise ConfigError(f"[dataset] mode must be prediction or post-processing, got {cfg.dataset.mode!r}")
    if cfg.sweep.strategy not in ("old-and-new", "old", "new"):
        raise ConfigError(f"[sweep] unknown strategy {cfg.sweep.strategy!r}")
    if cfg.truth.train_windows < 2 or cfg.truth.eval_windows < 0:
        raise ConfigError("[truth] needs at least two training windows and non-negative evaluation windows")
    if cfg.model.halfwidth < 0 or 2 * cfg.model.halfwidth + 1 > cfg.model.N:
        raise ConfigError("[model] halfwidth out of range")
    if not cfg.network.hidden or any(h < 1 for h in cfg.network.hidden):
        raise ConfigError("[network] hidden must list positive layer widths")
    if cfg.network.scratch_out_std <= 0:
        raise ConfigError("[network] scratch_out_std must be positive")
    if any(lead < 1 for lead in cfg.diagnostics.leads):
        raise ConfigError("[diagnostics] leads must be positive")
    if not 0.0 < cfg.diagnostics.final_fraction <= 1.0:
        raise ConfigError("[diagnostics] final_fraction must be in (0, 1]")
    if cfg.model.t_cycle_windows < 1:
        raise ConfigError("[model] t_cycle_windows must be positive")
