"""Source pre-training and the joint translation / target-encoder loop, plus checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import gradcore as gc
from .config import RunConfig, TrainConfig, echo_config, parse_config
from .data import DomainData, ReIDSet, augment, pk_sample
from .evalrank import Metrics, append_csv_row, evaluate_encoder, relation_preservation
from .gradcore import AdamState, adam_step
from .nets import (Arch, ClassifierSpec, Params, classify, copy_params, encode, feature_batches,
                   init_classifier, init_models, momentum_update, translate_batches)
from .pseudo import NOISE, PseudoLabeling, build_unified_labels, dbscan, estimate_eps, kmeans
from .relreg import cross_entropy, discriminator_term, sdt_objective, triplet_term

log = logging.getLogger(__name__)

MAGIC = b"SDA1"
FORMAT_VERSION = 1
COLLAPSE_LIMIT = 3


# ---------------------------------------------------------------- schedules

def pretrain_lr(epoch: int, base: float, decay_every: int = 10) -> float:
    """Step decay: divide by 10 every ``decay_every`` epochs (1-based epochs)."""
    return base * 0.1 ** ((epoch - 1) // decay_every)


def joint_lr(epoch: int, base: float, constant: int = 25, total: int = 50) -> float:
    """Constant for ``constant`` epochs, then linear decay reaching 0 at ``total``."""
    ramp = total - constant
    if ramp <= 0:
        return base
    return base * (1.0 - max(0, epoch - constant) / ramp)


# ---------------------------------------------------------------- helpers

def params_hash(p: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(p):
        h.update(k.encode())
        h.update(np.ascontiguousarray(p[k]).tobytes())
    return h.hexdigest()


def _iters(cfg: TrainConfig, n: int) -> int:
    return cfg.iters_per_epoch or max(1, math.ceil(n / (cfg.P * cfg.K)))


def _fill(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 2, 3))


GENERATORS = ("G_st", "G_ts")
DISCRIMINATORS = ("D_s", "D_t")


@dataclass
class RunState:
    models: dict[str, Params]
    opt: dict[str, AdamState]
    epoch: int
    rng: np.random.Generator
    config: RunConfig = field(default_factory=RunConfig)


def _step(state: RunState, names, loss_fn: Callable[[dict], gc.Tensor], lr: float) -> float:
    """Differentiate ``loss_fn`` w.r.t. the networks in ``names`` and apply ADAM to each."""
    leaves = {n: gc.leaves_from(state.models[n]) for n in names}
    view = dict(state.models)
    view.update(leaves)
    loss = loss_fn(view)
    flat = [t for n in names for t in leaves[n].values()]
    grads = gc.backward(loss, flat)
    for n in names:
        if n not in state.opt:
            state.opt[n] = AdamState.zeros_like(state.models[n])
        g = {k: grads[t] for k, t in leaves[n].items()}
        state.models[n], state.opt[n] = adam_step(state.models[n], g, state.opt[n], lr)
    return loss.item()


# ---------------------------------------------------------------- pre-training

def pretrain_source(source: ReIDSet, cfg: TrainConfig, arch: Arch,
                    on_epoch: Callable[[int, float], None] | None = None) -> tuple[dict[str, Params], list[float]]:
    """Train the source encoder and classifier on labeled source data; returns params and per-epoch loss."""
    rng = np.random.default_rng(cfg.seed)
    ids, inv = np.unique(source.ids, return_inverse=True)
    models = {"Fs": init_models(arch, len(ids), 1, cfg.seed)["Fs"],
              "Cs": init_classifier(ClassifierSpec(arch.enc.feat_dim, len(ids)), rng)}
    state = RunState(models, {}, 0, rng)
    P = min(cfg.P, len(ids))
    fill = _fill(source.images)
    history = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        lr = pretrain_lr(epoch, cfg.lr_encoder, cfg.pretrain_decay_every)
        losses = []
        for _ in range(_iters(cfg, len(source))):
            idx = pk_sample(inv, P, cfg.K, rng)
            x = augment(source.images[idx], cfg.augment, rng, fill)
            y = inv[idx]

            def loss_fn(v, x=x, y=y):
                f = encode(v["Fs"], x, arch.enc)
                return cross_entropy(classify(v["Cs"], f), y) + triplet_term(f, y, cfg.margin)

            losses.append(_step(state, ("Fs", "Cs"), loss_fn, lr))
        history.append(float(np.mean(losses)))
        if on_epoch:
            on_epoch(epoch, history[-1])
        log.info("pretrain epoch %d lr %.2e loss %.4f", epoch, lr, history[-1])
    return {"Fs": state.models["Fs"], "Cs": state.models["Cs"]}, history


# ---------------------------------------------------------------- joint training

@dataclass
class EpochRecord:
    epoch: int
    metrics: Metrics | None
    relation_gap: float
    num_clusters: int
    classifier_width: int
    fs_hash: str
    losses: dict[str, float]


@dataclass
class JointResult:
    state: RunState
    history: list[EpochRecord]
    trace: list[tuple[int, str]]  # (epoch, event)


def cluster_target(feats: np.ndarray, cfg: TrainConfig, epoch: int) -> PseudoLabeling:
    if cfg.clusterer == "kmeans":
        lab = kmeans(feats, min(cfg.kmeans_k, len(feats)), seed=cfg.seed * 1000 + epoch)
    else:
        eps = cfg.dbscan_eps or estimate_eps(feats, cfg.eps_quantile, seed=cfg.seed)
        lab = dbscan(feats, eps, cfg.dbscan_min_pts)
    return PseudoLabeling(lab.assignment, lab.num_clusters, epoch)


def rebuild_classifier(prev: Params, num_source: int, num_target: int, feat_dim: int,
                       rng: np.random.Generator) -> Params:
    """Keep ``prev`` when the class count is unchanged; otherwise keep its source columns
    and draw fresh target columns."""
    width = num_source + num_target
    if prev["w"].shape[1] == width:
        return copy_params(prev)
    fresh = init_classifier(ClassifierSpec(feat_dim, max(width, 2)), rng)
    w, b = fresh["w"][:, :width], fresh["b"][:width]
    w[:, :num_source] = prev["w"][:, :num_source]
    b[:num_source] = prev["b"][:num_source]
    return {"w": w, "b": b}


def joint_train(source: DomainData, target: DomainData, pretrained: Mapping[str, Params] | None,
                run: RunConfig, csv_path=None, evaluate: bool = True,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> JointResult:
    """Alternate translation, target-encoder and discriminator updates per batch."""
    if pretrained is None or "Fs" not in pretrained:
        raise ValueError("joint training needs a pre-trained source encoder")
    cfg = run.train
    arch = cfg.arch(source.train.images.shape[1:])
    src = source.train
    tgt = target.train
    s_ids, s_inv = np.unique(src.ids, return_inverse=True)
    p_s = len(s_ids)
    rng = np.random.default_rng(cfg.seed)
    models = init_models(arch, p_s, 1, cfg.seed, pretrained)
    models["Ct"] = copy_params(pretrained["Cs"]) if "Cs" in pretrained else models["Ct"]
    state = RunState(models, {}, 0, rng, run)
    fs_hash = params_hash(models["Fs"])
    weights = cfg.weights
    measure = cfg.measure_encoder
    translating = cfg.use_translation
    fill_s, fill_t = _fill(src.images), _fill(tgt.images)
    P_s = min(cfg.P, p_s)
    history: list[EpochRecord] = []
    trace: list[tuple[int, str]] = []
    collapsed = 0

    translated_src = None
    if translating and not cfg.joint_training:
        _pretrain_translation(state, src, s_inv, tgt, cfg, arch)
        translated_src = translate_batches(state.models["G_st"], src.images, arch.gen)

    for epoch in range(1, cfg.joint_epochs + 1):
        state.epoch = epoch
        lr_enc = joint_lr(epoch, cfg.lr_encoder, cfg.joint_constant_epochs, cfg.joint_epochs)
        lr_tr = joint_lr(epoch, cfg.lr_translation, cfg.joint_constant_epochs, cfg.joint_epochs)

        # pseudo labels, once per epoch, before any batch
        num_clusters = 0
        t_labels = None
        if cfg.use_pseudo_labels:
            feats = feature_batches(state.models["Ft"], tgt.images, arch.enc)
            labeling = cluster_target(feats, cfg, epoch)
            unified = build_unified_labels(p_s, labeling)
            trace.append((epoch, "cluster"))
            num_clusters = unified.num_target
            if num_clusters < 2:
                collapsed += 1
                log.warning("epoch %d: %d target clusters; training on source data only",
                            epoch, num_clusters)
                if collapsed >= COLLAPSE_LIMIT:
                    raise RuntimeError(f"pseudo labels collapsed for {collapsed} consecutive epochs "
                                       f"(clusterer={cfg.clusterer}); check eps/k settings")
            else:
                collapsed = 0
                t_labels = unified.labels
        width = p_s + (num_clusters if t_labels is not None else 0)
        if state.models["Ct"]["w"].shape[1] != width:
            state.opt.pop("Ct", None)
        state.models["Ct"] = rebuild_classifier(state.models["Ct"], p_s, width - p_s,
                                                arch.enc.feat_dim, rng)

        sums: dict[str, list[float]] = {}
        for _ in range(_iters(cfg, len(src))):
            idx_s = pk_sample(s_inv, P_s, cfg.K, rng)
            ys = s_inv[idx_s]
            xs = augment(src.images[idx_s], cfg.augment, rng, fill_s)
            if t_labels is not None:
                P_t = min(cfg.P, num_clusters)
                idx_t = pk_sample(t_labels, P_t, cfg.K, rng)
                yt = t_labels[idx_t]
            else:
                idx_t = np.sort(rng.choice(len(tgt), size=min(len(tgt), P_s * cfg.K), replace=False))
                yt = None
            xt = augment(tgt.images[idx_t], cfg.augment, rng, fill_t)

            fake_t = None
            if translating and cfg.joint_training:
                holder = {}

                def g_loss(v):
                    terms = sdt_objective(xs, ys, xt, v, arch, weights, variant=cfg.rc_variant,
                                          measure=measure, tau=cfg.tau)
                    holder["terms"] = terms
                    return terms.total

                sums.setdefault("sdt", []).append(_step(state, GENERATORS, g_loss, lr_tr))
                terms = holder["terms"]
                fake_t, fake_s = terms.fake_t.data, terms.fake_s.data
                trace.append((epoch, "G"))
            elif translating:
                fake_t = augment(translated_src[idx_s], cfg.augment, rng, fill_t)

            parts_x, parts_y, parts_kind = [], [], []
            if fake_t is not None:
                parts_x.append(fake_t); parts_y.append(ys); parts_kind.append("s")
            if cfg.include_raw_source:
                parts_x.append(xs); parts_y.append(ys); parts_kind.append("s")
            if yt is not None:
                parts_x.append(xt); parts_y.append(yt); parts_kind.append("t")
            if parts_x:
                X = np.concatenate(parts_x)
                Y = np.concatenate(parts_y)
                kinds = np.concatenate([np.full(len(p), k) for p, k in zip(parts_x, parts_kind)])

                def f_loss(v, X=X, Y=Y, kinds=kinds):
                    f = encode(v["Ft"], X, arch.enc)
                    logits = classify(v["Ct"], f)
                    if cfg.unified_labels or yt is None:
                        ce = cross_entropy(logits, Y)
                    else:
                        ce = _split_ce(logits, Y, kinds, p_s)
                    return ce + triplet_term(f, Y, cfg.margin)

                sums.setdefault("enc", []).append(
                    _step(state, ("Ft", "Ct"), f_loss, lr_enc))
                trace.append((epoch, "F"))

            if cfg.momentum_encoder:
                state.models["Ft_star"] = momentum_update(state.models["Ft_star"], state.models["Ft"],
                                                          cfg.momentum)
                trace.append((epoch, "momentum"))

            if translating and cfg.joint_training and weights.adv:
                def d_loss(v, fake_t=fake_t, fake_s=fake_s, xs=xs, xt=xt):
                    return (discriminator_term(xt, fake_t, v["D_t"], arch)
                            + discriminator_term(xs, fake_s, v["D_s"], arch))

                sums.setdefault("disc", []).append(_step(state, DISCRIMINATORS, d_loss, lr_tr))
                trace.append((epoch, "D"))

        if params_hash(state.models["Fs"]) != fs_hash:
            raise RuntimeError("source encoder parameters changed during joint training")
        metrics, gap = None, float("nan")
        if evaluate and target.query is not None and target.gallery is not None:
            metrics = evaluate_encoder(state.models["Ft"], arch, target.query, target.gallery)
            if translating:
                gap = relation_preservation(state.models["Fs"], state.models["Ft"],
                                            state.models["G_st"], src, arch,
                                            n_triplets=cfg.relation_triplets, seed=cfg.seed,
                                            tau=cfg.tau)
            if csv_path is not None:
                append_csv_row(csv_path, epoch, metrics, gap)
        rec = EpochRecord(epoch, metrics, gap, num_clusters, state.models["Ct"]["w"].shape[1], fs_hash,
                          {k: float(np.mean(v)) for k, v in sums.items()})
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if metrics is not None:
            log.info("epoch %d mAP %.4f top1 %.4f clusters %d gap %.4f", epoch, metrics.mAP,
                     metrics.cmc1, num_clusters, gap)
    return JointResult(state, history, trace)


def _split_ce(logits: gc.Tensor, Y: np.ndarray, kinds: np.ndarray, p_s: int) -> gc.Tensor:
    """Separate classifiers for translated-source and target rows, averaged over all rows."""
    n = len(Y)
    total = None
    for kind, cols in (("s", slice(0, p_s)), ("t", slice(p_s, None))):
        rows = np.flatnonzero(kinds == kind)
        if not len(rows):
            continue
        sub = logits[rows][:, cols]
        y = Y[rows] - (0 if kind == "s" else p_s)
        term = cross_entropy(sub, y) * (len(rows) / n)
        total = term if total is None else total + term
    return total


def _pretrain_translation(state: RunState, src: ReIDSet, s_inv: np.ndarray, tgt: ReIDSet,
                          cfg: TrainConfig, arch: Arch) -> None:
    """Train the translation networks alone with the target encoder frozen at its initial value."""
    rng = state.rng
    P_s = min(cfg.P, len(np.unique(s_inv)))
    fill_s, fill_t = _fill(src.images), _fill(tgt.images)
    epochs = cfg.translation_epochs or cfg.joint_epochs
    for epoch in range(1, epochs + 1):
        lr = joint_lr(epoch, cfg.lr_translation, cfg.joint_constant_epochs * epochs // max(cfg.joint_epochs, 1),
                      epochs)
        for _ in range(_iters(cfg, len(src))):
            idx_s = pk_sample(s_inv, P_s, cfg.K, rng)
            ys = s_inv[idx_s]
            xs = augment(src.images[idx_s], cfg.augment, rng, fill_s)
            idx_t = np.sort(rng.choice(len(tgt), size=min(len(tgt), P_s * cfg.K), replace=False))
            xt = augment(tgt.images[idx_t], cfg.augment, rng, fill_t)
            holder = {}

            def g_loss(v):
                holder["t"] = sdt_objective(xs, ys, xt, v, arch, cfg.weights, variant=cfg.rc_variant,
                                            measure="Ft", tau=cfg.tau)
                return holder["t"].total

            _step(state, GENERATORS, g_loss, lr)
            fake_t, fake_s = holder["t"].fake_t.data, holder["t"].fake_s.data
            if cfg.weights.adv:
                _step(state, DISCRIMINATORS,
                      lambda v: (discriminator_term(xt, fake_t, v["D_t"], arch)
                                 + discriminator_term(xs, fake_s, v["D_s"], arch)), lr)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    models: dict[str, Params]
    opt: dict[str, AdamState]
    epoch: int
    rng_state: dict | None
    config_text: str
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> RunConfig:
        return parse_config(text=self.config_text)

    @classmethod
    def from_state(cls, state: RunState, extra: dict | None = None) -> "Checkpoint":
        return cls({k: dict(v) for k, v in state.models.items()}, dict(state.opt), state.epoch,
                   state.rng.bit_generator.state, echo_config(state.config), extra or {})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``SDA1`` + u64 metadata length + JSON metadata + little-endian float64 payload."""
    tensors: list[tuple[str, np.ndarray]] = []
    for net in sorted(ckpt.models):
        for k in sorted(ckpt.models[net]):
            tensors.append((f"model/{net}/{k}", ckpt.models[net][k]))
    adam_meta = {}
    for group in sorted(ckpt.opt):
        st = ckpt.opt[group]
        adam_meta[group] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        for k in sorted(st.m):
            tensors.append((f"adam/{group}/m/{k}", st.m[k]))
            tensors.append((f"adam/{group}/v/{k}", st.v[k]))
    directory, offset = [], 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += 8 * int(arr.size)
    meta = {"format_version": FORMAT_VERSION, "epoch": ckpt.epoch, "config": ckpt.config_text,
            "rng_state": ckpt.rng_state, "adam": adam_meta, "tensors": directory, "extra": ckpt.extra}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an SDA checkpoint")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + n:
        raise ValueError(f"{path}: truncated metadata")
    meta = json.loads(raw[12:12 + n].decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    base = 12 + n
    expected = sum(8 * t["count"] for t in meta["tensors"])
    if len(raw) != base + expected:
        raise ValueError(f"{path}: payload is {len(raw) - base} bytes, expected {expected}")
    models: dict[str, Params] = {}
    ms: dict[str, dict] = {}
    vs: dict[str, dict] = {}
    for t in meta["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=t["count"], offset=start).astype(np.float64)
        arr = arr.reshape(t["shape"])
        kind, rest = t["name"].split("/", 1)
        if kind == "model":
            net, k = rest.split("/", 1)
            models.setdefault(net, {})[k] = arr
        else:
            group, mv, k = rest.split("/", 2)
            (ms if mv == "m" else vs).setdefault(group, {})[k] = arr
    opt = {}
    for group, am in meta["adam"].items():
        opt[group] = AdamState(ms.get(group, {}), vs.get(group, {}), am["step"], am["beta1"],
                               am["beta2"], am["eps"])
    return Checkpoint(models, opt, meta["epoch"], meta["rng_state"], meta["config"], meta.get("extra", {}))


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
