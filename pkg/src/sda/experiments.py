"""Ablation arms on the synthetic benchmark, sharing one pre-trained source encoder per seed."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DomainData, load_domain, synth_generate
from .evalrank import evaluate_encoder
from .nets import init_models
from .trainer import JointResult, joint_train, pretrain_source

log = logging.getLogger(__name__)

ARMS: dict[str, dict] = {
    "full": {},
    "no_rc": {"rc_variant": "none"},
    "baseline": {"use_translation": False},
    "no_pseudo": {"use_pseudo_labels": False},
    "frozen": {"joint_training": False},
    "pc": {"rc_variant": "pc"},
    "brc": {"rc_variant": "brc"},
    "contrastive": {"rc_variant": "contrastive"},
    "classification": {"rc_variant": "classification"},
    "triplet": {"rc_variant": "triplet"},
    "split_labels": {"unified_labels": False},
    "no_momentum": {"momentum_encoder": False},
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    mAP: float
    relation_gap: float
    seconds: float
    curve: list[float] = field(default_factory=list, repr=False)


@dataclass
class SeedResults:
    seed: int
    pretrained_mAP: float
    untrained_mAP: float
    arms: dict[str, ArmResult]


def arm_config(run: RunConfig, arm: str, seed: int) -> RunConfig:
    if arm not in ARMS:
        raise KeyError(f"unknown arm {arm!r}; known: {', '.join(ARMS)}")
    train = dataclasses.replace(run.train, seed=seed, **ARMS[arm])
    return RunConfig(train, run.data)


def load_benchmark(run: RunConfig, seed: int) -> tuple[DomainData, DomainData]:
    """Market-style directories when configured, else the seeded synthetic domains."""
    d = run.data
    if d.source_dir or d.target_dir:
        if not (d.source_dir and d.target_dir):
            raise ValueError("set both source_dir and target_dir, or neither")
        shape = (d.height, d.width)
        return load_domain(d.source_dir, shape, "source"), load_domain(d.target_dir, shape, "target")
    return synth_generate(d.synth_spec(), d.data_seed if d.data_seed >= 0 else seed)


def run_seed(run: RunConfig, seed: int, arms, out_dir=None) -> SeedResults:
    """Pre-train once, then train every arm from the same source encoder."""
    source, target = load_benchmark(run, seed)
    cfg = dataclasses.replace(run.train, seed=seed)
    arch = cfg.arch(source.train.images.shape[1:])
    pretrained, _ = pretrain_source(source.train, cfg, arch)
    pre_map = evaluate_encoder(pretrained["Fs"], arch, target.query, target.gallery).mAP
    fresh = init_models(arch, 2, 2, seed + 7919)["Ft"]
    untrained_map = evaluate_encoder(fresh, arch, target.query, target.gallery).mAP
    results = {}
    for arm in arms:
        t0 = time.perf_counter()
        csv_path = None
        if out_dir is not None:
            csv_path = Path(out_dir) / f"{arm}_seed{seed}.csv"
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            csv_path.unlink(missing_ok=True)
        res: JointResult = joint_train(source, target, pretrained, arm_config(run, arm, seed), csv_path)
        last = res.history[-1]
        results[arm] = ArmResult(arm, seed, last.metrics.mAP, last.relation_gap,
                                 time.perf_counter() - t0, [r.metrics.mAP for r in res.history])
        log.info("seed %d %-14s mAP %.4f gap %.4f (%.0fs)", seed, arm, last.metrics.mAP,
                 last.relation_gap, results[arm].seconds)
    return SeedResults(seed, pre_map, untrained_map, results)


def mean_map(results: list[SeedResults], arm: str) -> float:
    return float(np.mean([r.arms[arm].mAP for r in results]))
