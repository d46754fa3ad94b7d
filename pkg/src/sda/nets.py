"""Tiny conv nets standing in for the re-ID encoders, classifiers, generators and discriminators.

Parameters are plain ``dict[str, np.ndarray]`` snapshots. Forward functions
accept either arrays (treated as constants) or ``Tensor`` leaves, so the same
code serves inference and differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

Params = dict[str, np.ndarray]

MODEL_NAMES = ("Fs", "Ft", "Ft_star", "Cs", "Ct", "G_st", "G_ts", "D_s", "D_t")


@dataclass(frozen=True)
class EncoderSpec:
    input_shape: tuple[int, int, int] = (3, 24, 12)
    widths: tuple[int, ...] = (8, 16, 32)
    feat_dim: int = 32
    normalize: bool = True

    def __post_init__(self):
        if self.feat_dim < 2:
            raise ValueError("feature dimension must be >= 2")
        if not self.widths:
            raise ValueError("encoder needs at least one conv stage")


@dataclass(frozen=True)
class GeneratorSpec:
    channels: int = 3
    widths: tuple[int, ...] = (8, 16)
    residual: bool = True  # predict a correction to atanh(input) instead of the image itself

    def check_shape(self, h: int, w: int) -> None:
        f = 2 ** (len(self.widths) - 1)
        if h % f or w % f:
            raise ValueError(f"generator with {len(self.widths)} stages needs H, W divisible by {f}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    channels: int = 3
    widths: tuple[int, ...] = (8, 16)


@dataclass(frozen=True)
class ClassifierSpec:
    feat_dim: int
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("classifier needs at least 2 classes")


@dataclass(frozen=True)
class Arch:
    """The three architecture specs shared by every network of a run."""
    enc: EncoderSpec = EncoderSpec()
    gen: GeneratorSpec = GeneratorSpec()
    disc: DiscriminatorSpec = DiscriminatorSpec()


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _conv(rng, cin: int, cout: int) -> tuple[np.ndarray, np.ndarray]:
    return glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9), np.zeros(cout)


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> Params:
    p: Params = {}
    cin = spec.input_shape[0]
    for i, w in enumerate(spec.widths):
        p[f"conv{i}.w"], p[f"conv{i}.b"] = _conv(rng, cin, w)
        cin = w
    p["proj.w"] = glorot(rng, (cin, spec.feat_dim), cin, spec.feat_dim)
    p["proj.b"] = np.zeros(spec.feat_dim)
    return p


def init_classifier(spec: ClassifierSpec, rng: np.random.Generator) -> Params:
    return {"w": glorot(rng, (spec.feat_dim, spec.num_classes), spec.feat_dim, spec.num_classes),
            "b": np.zeros(spec.num_classes)}


def init_generator(spec: GeneratorSpec, rng: np.random.Generator) -> Params:
    p: Params = {}
    cin = spec.channels
    for i, w in enumerate(spec.widths):
        p[f"enc{i}.w"], p[f"enc{i}.b"] = _conv(rng, cin, w)
        cin = w
    for i in reversed(range(len(spec.widths) - 1)):
        # upsampled features -> width i, then concatenated with the matching skip
        p[f"dec{i}.w"], p[f"dec{i}.b"] = _conv(rng, cin, spec.widths[i])
        cin = 2 * spec.widths[i]
    p["out.w"], p["out.b"] = _conv(rng, cin, spec.channels)
    return p


def init_discriminator(spec: DiscriminatorSpec, rng: np.random.Generator) -> Params:
    p: Params = {}
    cin = spec.channels
    for i, w in enumerate(spec.widths):
        p[f"conv{i}.w"], p[f"conv{i}.b"] = _conv(rng, cin, w)
        cin = w
    p["out.w"], p["out.b"] = _conv(rng, cin, 1)
    return p


def copy_params(p: Mapping[str, np.ndarray]) -> Params:
    return {k: v.copy() for k, v in p.items()}


def init_models(arch: Arch, num_source: int, num_target: int, seed: int,
                pretrained: Mapping[str, Params] | None = None) -> dict[str, Params]:
    """Seeded parameters for all nine networks.

    ``pretrained`` may carry ``Fs`` (and optionally ``Cs``); the target encoder
    and its momentum copy then start as exact copies of ``Fs``.
    """
    rng = np.random.default_rng(seed)
    enc, gen, disc = arch.enc, arch.gen, arch.disc
    models: dict[str, Params] = {
        "Fs": init_encoder(enc, rng),
        "Cs": init_classifier(ClassifierSpec(enc.feat_dim, num_source), rng),
        "Ct": init_classifier(ClassifierSpec(enc.feat_dim, num_source + num_target), rng),
        "G_st": init_generator(gen, rng),
        "G_ts": init_generator(gen, rng),
        "D_s": init_discriminator(disc, rng),
        "D_t": init_discriminator(disc, rng),
    }
    ft = init_encoder(enc, rng)
    if pretrained is not None:
        models["Fs"] = copy_params(pretrained["Fs"])
        if "Cs" in pretrained:
            models["Cs"] = copy_params(pretrained["Cs"])
        ft = copy_params(pretrained["Fs"])
    models["Ft"] = ft
    models["Ft_star"] = copy_params(ft)
    return {k: models[k] for k in MODEL_NAMES}


def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def encode(params: Mapping, images, spec: EncoderSpec) -> Tensor:
    """Images [B,C,H,W] -> features [B,d]."""
    x = _t(images)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"encoder expects [B,{spec.input_shape}] images, got {x.shape}")
    h = x
    for i in range(len(spec.widths)):
        h = gc.relu(gc.conv2d(h, _t(params[f"conv{i}.w"]), _t(params[f"conv{i}.b"]), stride=2))
    f = gc.global_avg_pool(h) @ _t(params["proj.w"]) + _t(params["proj.b"])
    return gc.l2_normalize_rows(f) if spec.normalize else f


def classify(params: Mapping, features) -> Tensor:
    return _t(features) @ _t(params["w"]) + _t(params["b"])


def translate(params: Mapping, images, spec: GeneratorSpec) -> Tensor:
    """Encoder/decoder with skips; output has the input's shape with values in [-1, 1]."""
    x = _t(images)
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise ValueError(f"generator expects [B,{spec.channels},H,W] images, got {x.shape}")
    spec.check_shape(x.shape[2], x.shape[3])
    n = len(spec.widths)
    skips = []
    h = x
    for i in range(n):
        h = gc.relu(gc.conv2d(h, _t(params[f"enc{i}.w"]), _t(params[f"enc{i}.b"]),
                              stride=1 if i == 0 else 2))
        skips.append(h)
    for i in reversed(range(n - 1)):
        h = gc.relu(gc.conv2d(gc.upsample2x(h), _t(params[f"dec{i}.w"]), _t(params[f"dec{i}.b"])))
        h = gc.concat([h, skips[i]], axis=1)
    out = gc.conv2d(h, _t(params["out.w"]), _t(params["out.b"]))
    if spec.residual:
        out = out + gc.atanh(x)
    return gc.tanh(out)


def discriminate(params: Mapping, images, spec: DiscriminatorSpec) -> Tensor:
    """One realness score per image (average of the patch map)."""
    h = _t(images)
    if h.ndim != 4 or h.shape[1] != spec.channels:
        raise ValueError(f"discriminator expects [B,{spec.channels},H,W] images, got {h.shape}")
    for i in range(len(spec.widths)):
        h = gc.leaky_relu(gc.conv2d(h, _t(params[f"conv{i}.w"]), _t(params[f"conv{i}.b"]), stride=2))
    h = gc.conv2d(h, _t(params["out.w"]), _t(params["out.b"]))
    return gc.reshape(gc.global_avg_pool(h), (h.shape[0],))


def momentum_update(star: Mapping[str, np.ndarray], theta: Mapping[str, np.ndarray],
                    alpha: float) -> Params:
    """Exponential moving average ``alpha * star + (1 - alpha) * theta``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {alpha}")
    out = {}
    for k, s in star.items():
        t = theta[k]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {k}")
        # written as a step towards theta so equal inputs and alpha in {0, 1} are exact
        out[k] = t.copy() if alpha == 0.0 else s + (1.0 - alpha) * (t - s)
    return out


def feature_batches(params: Mapping, images: np.ndarray, spec: EncoderSpec,
                    batch: int = 256) -> np.ndarray:
    """Inference-only encoding of a large image array in chunks."""
    chunks = [encode(params, images[i:i + batch], spec).data for i in range(0, len(images), batch)]
    return np.concatenate(chunks) if chunks else np.zeros((0, spec.feat_dim))


def translate_batches(params: Mapping, images: np.ndarray, spec: GeneratorSpec,
                      batch: int = 256) -> np.ndarray:
    chunks = [translate(params, images[i:i + batch], spec).data for i in range(0, len(images), batch)]
    return np.concatenate(chunks) if chunks else images.copy()
