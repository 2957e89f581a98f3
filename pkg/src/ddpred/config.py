"""Run configuration: JSON file, strict validation, paper and desk presets.

A config file is a JSON object with any subset of the blocks below; missing
keys take the paper-scale defaults and unknown keys are rejected::

    {
      "seed": 0,
      "grid":  {"M": 32, "N": 32, "L": 6, "F": 11},
      "data":  {"count": 1000, "train_count": 800, "overrides": {}},
      "model": {"mode": "observation", "z_dim": 48, "n_flows": 4, ...},
      "train": {"epochs": 50, "batch_size": 16, "lr": 0.001, "horizon": 1, ...},
      "sweep": {"axis": "doppler", "dopplers_hz": [...], "horizons": [...], ...},
      "paths": {"data": "dataset.ddcp", "models": "models", "report": "report.csv"}
    }

The single ``seed`` drives dataset generation, the train/test split and
training; sweep test sets use a seed derived from it so they never share
fading streams with the training data.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import rng
from .channel import GridConfig, ScenarioParams
from .evaluate import DEFAULT_DOPPLERS, DEFAULT_HORIZONS, HORIZON_SWEEP_DOPPLER_HZ, PREDICTORS
from .model import MODES, ModelConfig, TrainHyper


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class GridBlock:
    M: int = 32
    N: int = 32
    L: int = 6
    F: int = 11


@dataclass(frozen=True)
class DataBlock:
    count: int = 1000
    train_count: int = 800
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ModelBlock:
    mode: str = "observation"
    z_dim: int = 48
    n_flows: int = 4
    enc_hidden: tuple = (256, 128)
    dec_hidden: tuple = (128, 256)
    prior_hidden: tuple = (64,)
    decoder_skip: bool = True
    beta_warmup_epochs: int = 10
    n_samples: int = 16
    rnn_hidden: int = 64
    rnn_unroll: int = 4


@dataclass(frozen=True)
class TrainBlock:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    horizon: int = 1


@dataclass(frozen=True)
class SweepBlock:
    axis: str = "doppler"
    dopplers_hz: tuple = DEFAULT_DOPPLERS
    horizon: int = 1
    horizons: tuple = DEFAULT_HORIZONS
    doppler_hz: float = HORIZON_SWEEP_DOPPLER_HZ
    test_count: int = 200
    predictors: tuple = PREDICTORS


@dataclass(frozen=True)
class PathsBlock:
    data: str = "dataset.ddcp"
    models: str = "models"
    report: str = "report.csv"


_BLOCKS = {"grid": GridBlock, "data": DataBlock, "model": ModelBlock, "train": TrainBlock,
           "sweep": SweepBlock, "paths": PathsBlock}
AXES = ("doppler", "horizon")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    grid: GridBlock = GridBlock()
    data: DataBlock = DataBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    sweep: SweepBlock = SweepBlock()
    paths: PathsBlock = PathsBlock()

    # -- presets ------------------------------------------------------------

    @classmethod
    def paper(cls) -> "RunConfig":
        return cls()

    def desk(self) -> "RunConfig":
        """Same config on the 8x8x4 grid with every hidden width halved."""
        half = lambda hs: tuple(max(1, h // 2) for h in hs)
        m = self.model
        return dataclasses.replace(
            self, grid=dataclasses.replace(self.grid, M=8, N=8, L=4, F=11),
            model=dataclasses.replace(m, enc_hidden=half(m.enc_hidden), dec_hidden=half(m.dec_hidden),
                                      prior_hidden=half(m.prior_hidden)))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed)).validate()

    # -- derived objects ----------------------------------------------------

    def grid_config(self) -> GridConfig:
        return GridConfig(M=self.grid.M, N=self.grid.N, L=self.grid.L, F=self.grid.F)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(x_dim=self.grid_config().feature_len, z_dim=m.z_dim, enc_hidden=m.enc_hidden,
                           dec_hidden=m.dec_hidden, prior_hidden=m.prior_hidden, n_flows=m.n_flows,
                           mode=m.mode, decoder_skip=m.decoder_skip)

    def train_hyper(self, horizon: int | None = None) -> TrainHyper:
        t = self.train
        return TrainHyper(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=self.seed,
                          beta_warmup_epochs=self.model.beta_warmup_epochs,
                          horizon=t.horizon if horizon is None else int(horizon))

    @property
    def sweep_seed(self) -> int:
        return rng.derive_seed(self.seed, rng.SWEEP)

    # -- validation and I/O -------------------------------------------------

    def validate(self) -> "RunConfig":
        try:
            self._validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def _validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 63:
            raise ConfigError(f"seed must be an integer in [0, 2^63), got {self.seed!r}")
        g = self.grid_config()
        d = self.data
        if d.count < 1:
            raise ConfigError(f"data.count must be >= 1, got {d.count}")
        if not 0 < d.train_count < d.count:
            raise ConfigError(f"data.train_count must lie in (0, {d.count}), got {d.train_count}")
        unknown = set(d.overrides) - {f.name for f in dataclasses.fields(ScenarioParams)}
        if unknown:
            raise ConfigError(f"unknown scenario override(s): {sorted(unknown)}")
        m = self.model
        if m.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {m.mode!r}")
        self.model_config()
        for name in ("n_samples", "rnn_hidden", "rnn_unroll"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        t = self.train
        if t.epochs < 0 or t.batch_size < 1 or not t.lr > 0:
            raise ConfigError("train needs epochs >= 0, batch_size >= 1 and lr > 0")
        if not 0 <= t.horizon < g.F:
            raise ConfigError(f"train.horizon must lie in [0, {g.F - 1}]")
        s = self.sweep
        if s.axis not in AXES:
            raise ConfigError(f"sweep.axis must be one of {AXES}, got {s.axis!r}")
        if s.test_count < 2:
            raise ConfigError("sweep.test_count must be >= 2")
        bad = set(s.predictors) - set(PREDICTORS)
        if bad or not s.predictors:
            raise ConfigError(f"sweep.predictors must be a non-empty subset of {PREDICTORS}")
        if not s.dopplers_hz or not s.horizons:
            raise ConfigError("sweep axis lists must be non-empty")
        if any(not 0 <= h < g.F for h in (*s.horizons, s.horizon)):
            raise ConfigError(f"sweep horizons must lie in [0, {g.F - 1}]")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``raw`` on ``base`` (paper defaults), rejecting unknown keys and wrong types."""
    base = base or RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - set(_BLOCKS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kw = {}
    if "seed" in raw:
        kw["seed"] = raw["seed"]
    for name, cls in _BLOCKS.items():
        if name not in raw:
            continue
        block = raw[name]
        if not isinstance(block, dict):
            raise ConfigError(f"{name} must be an object")
        current = getattr(base, name)
        fields_ = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(block) - set(fields_)
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {sorted(bad)}")
        values = {}
        for key, value in block.items():
            values[key] = _coerce(f"{name}.{key}", value, getattr(current, key))
        kw[name] = dataclasses.replace(current, **values)
    return dataclasses.replace(base, **kw).validate()


def _coerce(where, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        kind = type(default[0]) if default else None
        out = []
        for v in value:
            if kind is not None:
                v = _coerce(where, v, default[0])
            out.append(v)
        return tuple(out)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object")
        return dict(value)
    raise ConfigError(f"{where}: unsupported value")


def load(path, desk: bool = False) -> RunConfig:
    """Read a JSON config; ``desk`` applies the desk preset before the file's values."""
    base = RunConfig().desk() if desk else RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    return from_dict(raw, base)
