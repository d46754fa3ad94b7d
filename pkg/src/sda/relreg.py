"""Losses: encoder objectives, the translation losses, and relation-consistency terms.

Triplet indices are mined on raw feature values and treated as data; gradients
only flow through the feature rows they select.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .nets import Arch, classify, discriminate, encode, translate

PROB_EPS = 1e-7
RC_VARIANTS = ("rc", "pc", "brc", "contrastive", "classification", "triplet", "none")


@dataclass(frozen=True)
class LossWeights:
    rc: float = 1.0
    cyc: float = 10.0
    adv: float = 1.0
    apr: float = 0.5
    margin: float = 0.3

    def __post_init__(self):
        for name in ("rc", "cyc", "adv", "apr", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class TripletIndices:
    pos: np.ndarray
    neg: np.ndarray


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def hardest_triplets(features, labels: Sequence[int]) -> TripletIndices:
    """Farthest positive and nearest negative per anchor; ties go to the lowest index."""
    f = _arr(features)
    y = np.asarray(labels)
    if len(y) != len(f):
        raise ValueError("labels and features differ in length")
    dist = pairwise_distances(f)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(len(y), dtype=bool)
    neg_mask = ~same
    for i in range(len(y)):
        if not pos_mask[i].any():
            raise ValueError(f"label {y[i]} has no positive in the batch")
        if not neg_mask[i].any():
            raise ValueError(f"label {y[i]} has no negative in the batch")
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    gc.record_choice(np.concatenate([pos, neg]))
    return TripletIndices(pos, neg)


def _row_dist(a: Tensor, b: Tensor) -> Tensor:
    d2 = gc.sum(gc.square(a - b), axis=1)
    # floor keeps sqrt differentiable for coincident features
    return gc.sqrt(gc.clip(d2, 1e-12, np.inf))


def triplet_term(features: Tensor, labels: Sequence[int], margin: float,
                 idx: TripletIndices | None = None) -> Tensor:
    idx = hardest_triplets(features, labels) if idx is None else idx
    d_ap = _row_dist(features, features[idx.pos])
    d_an = _row_dist(features, features[idx.neg])
    return gc.mean(gc.relu(d_ap - d_an + margin))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    y = np.asarray(labels, dtype=int)
    n, p = logits.shape
    if np.any(y < 0) or np.any(y >= p):
        raise ValueError(f"labels must lie in [0, {p})")
    logp = gc.log_softmax(logits)
    return -gc.mean(logp[np.arange(n), y])


def soft_cross_entropy(target: np.ndarray, logits: Tensor) -> Tensor:
    """Mean over rows of -sum(target * log clip(softmax(logits)))."""
    p = gc.clip(gc.softmax(logits), PROB_EPS, 1.0 - PROB_EPS)
    return gc.mean(-gc.sum(Tensor(target) * gc.log(p), axis=1))


def encoder_objective(features: Tensor, logits: Tensor, labels: Sequence[int],
                      margin: float = 0.3) -> Tensor:
    """Identity cross-entropy plus batch-hard triplet loss."""
    return cross_entropy(logits, labels) + triplet_term(features, labels, margin)


def relation_score(f, f_p, f_n, tau: float = 1.0) -> Tensor:
    """Softmax-triplet ratio exp<f,f_p> / (exp<f,f_p> + exp<f,f_n>), row-wise."""
    f, f_p, f_n = gc.as_tensor(f), gc.as_tensor(f_p), gc.as_tensor(f_n)
    if f.ndim == 1:
        f, f_p, f_n = (gc.reshape(t, (1, -1)) for t in (f, f_p, f_n))
    s_p = gc.sum(f * f_p, axis=1) * (1.0 / tau)
    s_n = gc.sum(f * f_n, axis=1) * (1.0 / tau)
    shift = Tensor(np.maximum(s_p.data, s_n.data))
    e_p = gc.exp(s_p - shift)
    e_n = gc.exp(s_n - shift)
    return e_p / (e_p + e_n)


def soft_bce(p, q) -> Tensor:
    """Elementwise -q log p - (1-q) log(1-p) with p clamped away from 0 and 1."""
    p = gc.clip(gc.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    q = gc.as_tensor(q)
    return -(q * gc.log(p) + (1.0 - q) * gc.log(1.0 - p))


def relation_consistency_from_features(f_src, f_trans: Tensor, labels: Sequence[int],
                                       tau: float = 1.0) -> Tensor:
    """Mine triplets once on source features and compare relations after translation."""
    f_src = Tensor(_arr(f_src))  # soft target: never differentiated
    idx = hardest_triplets(f_src, labels)
    r_src = relation_score(f_src, f_src[idx.pos], f_src[idx.neg], tau).data
    r_trans = relation_score(f_trans, f_trans[idx.pos], f_trans[idx.neg], tau)
    return gc.mean(soft_bce(r_trans, r_src))


def relation_consistency_loss(xs, labels, fs: Mapping, f_measure: Mapping, g_st: Mapping,
                              arch: Arch, tau: float = 1.0) -> Tensor:
    f_src = encode(fs, xs, arch.enc).data
    f_trans = encode(f_measure, translate(g_st, xs, arch.gen), arch.enc)
    return relation_consistency_from_features(f_src, f_trans, labels, tau)


def adversarial_losses(reals, fakes: Tensor, d: Mapping, arch: Arch) -> tuple[Tensor, Tensor]:
    """LSGAN terms: (generator term, discriminator term). Fakes are detached for the latter."""
    fakes = gc.as_tensor(fakes)
    d_fake = discriminate(d, fakes, arch.disc)
    gen_term = gc.mean(gc.square(d_fake - 1.0))
    d_real = discriminate(d, reals, arch.disc)
    d_fake_det = discriminate(d, fakes.detach(), arch.disc)
    disc_term = gc.mean(gc.square(d_real - 1.0)) + gc.mean(gc.square(d_fake_det))
    return gen_term, disc_term


def generator_adv_term(fakes: Tensor, d: Mapping, arch: Arch) -> Tensor:
    return gc.mean(gc.square(discriminate(d, fakes, arch.disc) - 1.0))


def discriminator_term(reals, fakes, d: Mapping, arch: Arch) -> Tensor:
    d_real = discriminate(d, reals, arch.disc)
    d_fake = discriminate(d, gc.as_tensor(fakes).detach(), arch.disc)
    return gc.mean(gc.square(d_real - 1.0)) + gc.mean(gc.square(d_fake))


def l1(a: Tensor, b) -> Tensor:
    return gc.mean(gc.abs(a - b))


def cycle_loss(xs, xt, g_st: Mapping, g_ts: Mapping, arch: Arch) -> Tensor:
    xs, xt = gc.as_tensor(xs), gc.as_tensor(xt)
    rec_s = translate(g_ts, translate(g_st, xs, arch.gen), arch.gen)
    rec_t = translate(g_st, translate(g_ts, xt, arch.gen), arch.gen)
    return l1(rec_s, xs) + l1(rec_t, xt)


def appearance_loss(xs, xt, g_st: Mapping, g_ts: Mapping, arch: Arch) -> Tensor:
    xs, xt = gc.as_tensor(xs), gc.as_tensor(xt)
    return l1(translate(g_ts, xs, arch.gen), xs) + l1(translate(g_st, xt, arch.gen), xt)


# ---------------------------------------------------------------- ablation regularizers

def prediction_consistency_from_features(f_src, cs: Mapping, f_trans: Tensor,
                                         ct: Mapping, num_source: int) -> Tensor:
    q = gc.softmax(classify(cs, _arr(f_src))).data
    logits = classify(ct, f_trans)[:, :num_source]
    return soft_cross_entropy(q, logits)


def prediction_consistency_loss(xs, fs: Mapping, cs: Mapping, f_measure: Mapping, ct: Mapping,
                                g_st: Mapping, arch: Arch) -> Tensor:
    f_src = encode(fs, xs, arch.enc).data
    f_trans = encode(f_measure, translate(g_st, xs, arch.gen), arch.enc)
    return prediction_consistency_from_features(f_src, cs, f_trans, ct, cs["w"].shape[1])


def _off_diagonal(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(n), n - 1)
    cols = np.array([j for i in range(n) for j in range(n) if j != i], dtype=int)
    return rows, cols


def batch_all_relation_from_features(f_src, f_trans: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax over each anchor's similarities to every other batch member, before vs after."""
    n = len(f_trans)
    rows, cols = _off_diagonal(n)
    fs = _arr(f_src)
    s_src = ((fs @ fs.T)[rows, cols] / tau).reshape(n, n - 1)
    s_src = np.exp(s_src - s_src.max(axis=1, keepdims=True))
    r_src = s_src / s_src.sum(axis=1, keepdims=True)
    s_trans = gc.reshape((f_trans @ f_trans.T)[rows, cols], (n, n - 1)) * (1.0 / tau)
    return soft_cross_entropy(r_src, s_trans)


def batch_all_relation_loss(xs, fs: Mapping, f_measure: Mapping, g_st: Mapping, arch: Arch,
                            tau: float = 1.0) -> Tensor:
    f_src = encode(fs, xs, arch.enc).data
    f_trans = encode(f_measure, translate(g_st, xs, arch.gen), arch.enc)
    return batch_all_relation_from_features(f_src, f_trans, tau)


def idreg_from_features(variant: str, f_src, f_trans: Tensor, labels: Sequence[int],
                        cs: Mapping, margin: float = 0.3) -> Tensor:
    if variant == "contrastive":
        return gc.mean(gc.sum(gc.square(f_trans - Tensor(_arr(f_src))), axis=1))
    if variant == "classification":
        return cross_entropy(classify(cs, f_trans), labels)
    if variant == "triplet":
        return triplet_term(f_trans, labels, margin)
    raise ValueError(f"unknown ID-based regularizer {variant!r}")


def idreg_losses(variant: str, xs, labels, fs: Mapping, cs: Mapping, f_measure: Mapping,
                 g_st: Mapping, arch: Arch, margin: float = 0.3) -> Tensor:
    f_src = encode(fs, xs, arch.enc).data
    f_trans = encode(f_measure, translate(g_st, xs, arch.gen), arch.enc)
    return idreg_from_features(variant, f_src, f_trans, labels, cs, margin)


def regularizer_from_features(variant: str, f_src, f_trans: Tensor, labels, *, cs: Mapping,
                              ct: Mapping, num_source: int, tau: float, margin: float) -> Tensor:
    """Dispatch for the translation regularizer slot of the SDT objective."""
    if variant == "rc":
        return relation_consistency_from_features(f_src, f_trans, labels, tau)
    if variant == "pc":
        return prediction_consistency_from_features(f_src, cs, f_trans, ct, num_source)
    if variant == "brc":
        return batch_all_relation_from_features(f_src, f_trans, tau)
    if variant in ("contrastive", "classification", "triplet"):
        return idreg_from_features(variant, f_src, f_trans, labels, cs, margin)
    raise ValueError(f"unknown regularizer {variant!r}; valid: {', '.join(RC_VARIANTS)}")


# ---------------------------------------------------------------- combined objective

@dataclass
class SDTTerms:
    total: Tensor
    rc: Tensor
    cyc: Tensor
    adv: Tensor
    apr: Tensor
    fake_t: Tensor
    fake_s: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "rc", "cyc", "adv", "apr")}


def sdt_objective(xs, ys, xt, models: Mapping[str, Mapping], arch: Arch,
                  weights: LossWeights = LossWeights(), *, variant: str = "rc",
                  measure: str = "Ft_star", tau: float = 1.0) -> SDTTerms:
    """Weighted generator-side translation objective.

    ``models`` maps network names to parameters; pass generator parameters as
    ``Tensor`` leaves to differentiate. Discriminators and encoders are used as
    given, and the source encoder output is always a constant.
    """
    xs, xt = gc.as_tensor(xs), gc.as_tensor(xt)
    g_st, g_ts = models["G_st"], models["G_ts"]
    fake_t = translate(g_st, xs, arch.gen)
    fake_s = translate(g_ts, xt, arch.gen)
    zero = Tensor(0.0)

    cyc = zero
    if weights.cyc:
        cyc = l1(translate(g_ts, fake_t, arch.gen), xs) + l1(translate(g_st, fake_s, arch.gen), xt)
    apr = zero
    if weights.apr:
        apr = l1(translate(g_ts, xs, arch.gen), xs) + l1(translate(g_st, xt, arch.gen), xt)
    adv = zero
    if weights.adv:
        adv = (generator_adv_term(fake_s, models["D_s"], arch)
               + generator_adv_term(fake_t, models["D_t"], arch))
    rc = zero
    if weights.rc and variant != "none":
        f_src = encode(models["Fs"], xs.data, arch.enc).data
        f_trans = encode(models[measure], fake_t, arch.enc)
        rc = regularizer_from_features(variant, f_src, f_trans, ys, cs=models["Cs"],
                                       ct=models["Ct"], num_source=models["Cs"]["w"].shape[1],
                                       tau=tau, margin=weights.margin)
    total = rc * weights.rc + cyc * weights.cyc + adv * weights.adv + apr * weights.apr
    return SDTTerms(total, rc, cyc, adv, apr, fake_t, fake_s)
