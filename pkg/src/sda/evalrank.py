"""Cross-camera retrieval metrics (mAP, CMC) and the relation-preservation diagnostic."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import ReIDSet, pk_sample
from .nets import Arch, encode, feature_batches, translate
from .relreg import hardest_triplets, relation_score

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "mAP", "cmc1", "cmc5", "cmc10", "relation_gap")


@dataclass(frozen=True)
class Metrics:
    mAP: float
    cmc1: float
    cmc5: float
    cmc10: float
    num_queries: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class RankingResult:
    order: np.ndarray  # gallery indices by descending similarity, filtered
    relevant: np.ndarray  # relevance flag per position of ``order``


def average_precision(relevant: np.ndarray) -> float:
    rel = np.asarray(relevant, dtype=bool)
    if not rel.any():
        raise ValueError("no relevant item in ranking")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[rel] / ranks).mean())


def rank_query(sim: np.ndarray, q_id: int, q_cam: int, g_ids: np.ndarray,
               g_cams: np.ndarray) -> RankingResult:
    order = np.argsort(-sim, kind="stable")
    keep = ~((g_ids[order] == q_id) & (g_cams[order] == q_cam))
    order = order[keep]
    return RankingResult(order, g_ids[order] == q_id)


def rank_and_score(q_feats: np.ndarray, q_ids, q_cams, g_feats: np.ndarray, g_ids,
                   g_cams) -> Metrics:
    """Cosine-similarity ranking with same-identity-same-camera gallery items removed."""
    if len(g_ids) == 0:
        raise ValueError("empty gallery")
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    qf = q_feats / np.maximum(np.linalg.norm(q_feats, axis=1, keepdims=True), 1e-12)
    gf = g_feats / np.maximum(np.linalg.norm(g_feats, axis=1, keepdims=True), 1e-12)
    sims = qf @ gf.T
    aps, cmc, dropped = [], np.zeros(3), []
    for i in range(len(q_ids)):
        r = rank_query(sims[i], q_ids[i], q_cams[i], g_ids, g_cams)
        if not r.relevant.any():
            dropped.append(i)
            continue
        aps.append(average_precision(r.relevant))
        first = int(np.argmax(r.relevant))
        cmc += [first < 1, first < 5, first < 10]
    if dropped:
        log.warning("%d queries without a valid gallery match dropped: %s", len(dropped), dropped[:10])
    if not aps:
        raise ValueError("no query has a valid gallery match")
    n = len(aps)
    return Metrics(float(np.mean(aps)), *(float(c / n) for c in cmc), n)


def evaluate_encoder(params: Mapping, arch: Arch, query: ReIDSet, gallery: ReIDSet) -> Metrics:
    qf = feature_batches(params, query.images, arch.enc)
    gf = feature_batches(params, gallery.images, arch.enc)
    return rank_and_score(qf, query.ids, query.cams, gf, gallery.ids, gallery.cams)


def relation_preservation(fs: Mapping, ft: Mapping, g_st: Mapping, source: ReIDSet, arch: Arch,
                          n_triplets: int = 200, seed: int = 0, P: int = 8, K: int = 4,
                          tau: float = 1.0) -> float:
    """Mean |R_source - R_translated| over hardest triplets from seeded source batches."""
    rng = np.random.default_rng(seed)
    gaps: list[float] = []
    P = min(P, len(np.unique(source.ids)))
    while len(gaps) < n_triplets:
        idx = pk_sample(source.ids, P, K, rng)
        x, y = source.images[idx], source.ids[idx]
        f_src = encode(fs, x, arch.enc).data
        f_trn = encode(ft, translate(g_st, x, arch.gen).data, arch.enc).data
        t = hardest_triplets(f_src, y)
        r_s = relation_score(f_src, f_src[t.pos], f_src[t.neg], tau).data
        r_t = relation_score(f_trn, f_trn[t.pos], f_trn[t.neg], tau).data
        gaps.extend(np.abs(r_s - r_t).tolist())
    return float(np.mean(gaps[:n_triplets]))


def append_csv_row(path, epoch: int, metrics: Metrics, relation_gap: float) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow([epoch, repr(metrics.mAP), repr(metrics.cmc1), repr(metrics.cmc5),
                    repr(metrics.cmc10), repr(float(relation_gap))])


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
