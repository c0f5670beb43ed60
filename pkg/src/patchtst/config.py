"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys are errors. Lists
are comma separated. Every key and its default is listed in ``RunConfig``;
``RunConfig().to_text()`` prints a complete annotated default file.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import SplitSpec, SynthSpec, load_csv, synth_generate
from .errors import ConfigError
from .model import FORECAST, ModelConfig
from .patching import NONOVERLAP, PADDED
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # data
    data_path: str = ""  # empty: use the synthetic generator below
    split: str = "fractions"  # fractions | ett_hourly | ett_minutely
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    standardize: bool = True
    synth_channels: int = 4
    synth_timesteps: int = 5000
    synth_periods: tuple = (24.0, 168.0)
    synth_sigma: float = 0.1
    synth_trend: float = 0.0
    synth_coupling: float = 0.0
    # patching / model
    L: int = 336
    T: int = 96
    P: int = 16
    S: int = 8
    patch_mode: str = PADDED
    d_model: int = 128
    heads: int = 16
    d_ff: int = 256
    layers: int = 3
    dropout: float = 0.2
    channel_mode: str = "independent"
    instance_norm: bool = True
    # training
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    seed: int = 2021
    schedule: str = "supervised"
    mask_ratio: float = 0.4
    train_fraction: float = 1.0
    probe_epochs: int = 20
    lp_epochs: int = 10
    ft_epochs: int = 20
    loss_space: str = "raw"
    recon_loss: str = "masked"
    max_steps: int = 0
    # experiments
    horizons: tuple = (96, 192, 336, 720)
    memory_budget_mb: float = 4096.0
    parallel: int = 1

    def __post_init__(self):
        if self.split not in ("fractions", "ett_hourly", "ett_minutely"):
            raise ConfigError(f"split must be fractions, ett_hourly or ett_minutely, got {self.split!r}")
        if self.L < self.P:
            raise ConfigError(f"inconsistent config: L={self.L} is shorter than P={self.P}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"inconsistent config: d_model={self.d_model} not divisible by heads={self.heads}")
        if self.patch_mode == NONOVERLAP and self.S != self.P:
            raise ConfigError(f"inconsistent config: patch_mode={NONOVERLAP} needs S == P (got S={self.S}, P={self.P})")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        try:
            self.model_config(max(self.synth_channels, 1))
            self.train_config()
            self.split_spec()
        except ConfigError as exc:
            raise ConfigError(f"inconsistent config: {exc}") from None

    def replace(self, **kw):
        return replace(self, **kw)

    # -- derived configs --
    def model_config(self, n_channels, head_kind=FORECAST) -> ModelConfig:
        return ModelConfig(
            L=self.L, T=self.T, P=self.P, S=self.S, d_model=self.d_model, n_heads=self.heads,
            d_ff=self.d_ff, n_layers=self.layers, dropout=self.dropout,
            channel_mode=self.channel_mode, instance_norm=self.instance_norm, head_kind=head_kind,
            patch_mode=self.patch_mode, n_channels=n_channels if self.channel_mode == "mixing" else 0,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.lr, beta1=self.beta1,
            beta2=self.beta2, adam_eps=self.adam_eps, patience=self.patience, seed=self.seed,
            schedule=self.schedule, mask_ratio=self.mask_ratio, train_fraction=self.train_fraction,
            probe_epochs=self.probe_epochs, lp_epochs=self.lp_epochs, ft_epochs=self.ft_epochs,
            loss_space=self.loss_space, recon_loss=self.recon_loss, max_steps=self.max_steps,
        )

    def split_spec(self) -> SplitSpec:
        if self.split == "ett_hourly":
            return SplitSpec.ett_hourly()
        if self.split == "ett_minutely":
            return SplitSpec.ett_minutely()
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec.random(self.synth_channels, self.synth_timesteps, self.seed,
                                periods=self.synth_periods, sigma=self.synth_sigma,
                                trend=self.synth_trend, coupling=self.synth_coupling)

    def load_table(self):
        if self.data_path:
            return load_csv(self.data_path)
        return synth_generate(self.synth_spec())

    # -- text form --
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return asdict(self)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False, "on": True, "off": False}


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return raw


_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


def parse_config_text(text: str, overrides: dict | None = None, source="<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _DEFAULTS[key])
    for key, raw in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw, _DEFAULTS[key]) if isinstance(raw, str) else raw
    return RunConfig(**values)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or just defaults when ``path`` is None); ``overrides`` win."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text(encoding="utf-8")
    return parse_config_text(text, overrides, source=str(path or "<defaults>"))
