"""Flat ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key belongs to exactly one
of :class:`TrainConfig` or :class:`DataConfig`; unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig, SynthSpec
from .nets import Arch, DiscriminatorSpec, EncoderSpec, GeneratorSpec
from .relreg import RC_VARIANTS, LossWeights

CLUSTERERS = ("kmeans", "dbscan")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    rc_variant: str = "rc"
    unified_labels: bool = True
    momentum_encoder: bool = True
    momentum: float = 0.999
    joint_training: bool = True
    use_pseudo_labels: bool = True
    use_translation: bool = True
    include_raw_source: bool = False
    clusterer: str = "kmeans"
    kmeans_k: int = 16
    dbscan_eps: float = 0.0  # 0 -> estimated from the feature distance distribution
    dbscan_min_pts: int = 4
    eps_quantile: float = 0.02
    lambda_rc: float = 1.0
    lambda_cyc: float = 10.0
    lambda_adv: float = 1.0
    lambda_apr: float = 0.5
    margin: float = 0.3
    tau: float = 1.0
    lr_encoder: float = 3.5e-4
    lr_translation: float = 2e-4
    pretrain_epochs: int = 30
    pretrain_decay_every: int = 10
    joint_epochs: int = 50
    joint_constant_epochs: int = 25
    translation_epochs: int = 0  # frozen-translation regime; 0 -> joint_epochs
    iters_per_epoch: int = 0  # 0 -> ceil(source train size / (P*K))
    P: int = 8
    K: int = 7
    flip_prob: float = 0.5
    crop_pad: int = 2
    erase_prob: float = 0.5
    enc_widths: tuple[int, ...] = (8, 16, 32)
    feat_dim: int = 32
    normalize_features: bool = True
    gen_widths: tuple[int, ...] = (8, 16)
    gen_residual: bool = True
    disc_widths: tuple[int, ...] = (8, 16)
    relation_triplets: int = 200

    def __post_init__(self):
        if self.rc_variant not in RC_VARIANTS:
            raise ConfigError(f"rc_variant={self.rc_variant!r}; valid variants: {', '.join(RC_VARIANTS)}")
        if self.clusterer not in CLUSTERERS:
            raise ConfigError(f"clusterer={self.clusterer!r}; valid: {', '.join(CLUSTERERS)}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.K < 2:
            raise ConfigError("K must be >= 2 so every batch has positives")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rc, self.lambda_cyc, self.lambda_adv, self.lambda_apr, self.margin)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(flip_prob=self.flip_prob, crop_pad=self.crop_pad, erase_prob=self.erase_prob)

    def arch(self, input_shape: tuple[int, int, int]) -> Arch:
        return Arch(EncoderSpec(input_shape, tuple(self.enc_widths), self.feat_dim, self.normalize_features),
                    GeneratorSpec(input_shape[0], tuple(self.gen_widths), self.gen_residual),
                    DiscriminatorSpec(input_shape[0], tuple(self.disc_widths)))

    @property
    def measure_encoder(self) -> str:
        return "Ft_star" if self.momentum_encoder else "Ft"


@dataclass
class DataConfig:
    source_dir: str = ""  # Market-style roots; empty -> synthetic data
    target_dir: str = ""
    ids_source: int = 16
    ids_target_train: int = 16
    ids_target_test: int = 16
    images_per_id: int = 8
    cameras: int = 3
    height: int = 24
    width: int = 12
    data_seed: int = -1  # -1 -> follow the run seed

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(ids_source=self.ids_source, ids_target_train=self.ids_target_train,
                         ids_target_test=self.ids_target_test, images_per_id=self.images_per_id,
                         cameras=self.cameras, height=self.height, width=self.width)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _owner() -> dict[str, type]:
    out = {}
    for cls in (TrainConfig, DataConfig):
        for f in fields(cls):
            out[f.name] = cls
    return out


def _convert(cls: type, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    tp = hints[name]
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{name}: unsupported type {tp}")


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    owner = _owner()
    train_kw, data_kw = {}, {}
    for key, raw in pairs.items():
        if key not in owner:
            raise ConfigError(f"unknown config key {key!r}")
        cls = owner[key]
        (train_kw if cls is TrainConfig else data_kw)[key] = _convert(cls, key, raw)
    return RunConfig(dataclasses.replace(cfg.train, **train_kw), dataclasses.replace(cfg.data, **data_kw))


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config(path=None, text: str | None = None) -> RunConfig:
    """Parse a config file (or text); missing keys keep their defaults."""
    if text is None:
        text = Path(path).read_text() if path is not None else ""
    return apply_overrides(RunConfig(), parse_text(text))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_config(cfg: RunConfig) -> str:
    lines = []
    for part in (cfg.train, cfg.data):
        for f in fields(part):
            lines.append(f"{f.name}={_fmt(getattr(part, f.name))}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: RunConfig) -> dict[str, str]:
    return parse_text(echo_config(cfg))
