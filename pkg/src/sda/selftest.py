"""Quick correctness checks runnable from the command line.

Gradient checks compare the tape against central differences on tiny networks;
oracle checks compare fast routines against direct quadratic-time versions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcore as gc
from .evalrank import rank_and_score
from .nets import Arch, DiscriminatorSpec, EncoderSpec, GeneratorSpec, init_models, translate
from .pseudo import NOISE, dbscan
from .relreg import (adversarial_losses, appearance_loss, batch_all_relation_loss, cycle_loss,
                     encoder_objective, hardest_triplets, idreg_losses, prediction_consistency_loss,
                     relation_consistency_loss)

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEPS = (1e-3, 3e-4, 1e-4, 3e-5, 1e-5)  # largest kink-safe step wins: roundoff shrinks as the step grows
KINK_MARGIN = 3e-5
TINY_ARCH = Arch(EncoderSpec((3, 8, 4), (3,), 4), GeneratorSpec(3, (3, 3)), DiscriminatorSpec(3, (3,)))
BATCH_LABELS = np.repeat(np.arange(4), 2)


@dataclass(frozen=True)
class GradCase:
    name: str
    net: str  # network whose parameters are perturbed
    loss: Callable[[dict, np.ndarray, np.ndarray], gc.Tensor]


def _gen_adv(m, xs, xt):
    return adversarial_losses(xt, translate(m["G_st"], xs, TINY_ARCH.gen), m["D_t"], TINY_ARCH)[0]


def _disc_adv(m, xs, xt):
    fake = translate(m["G_st"], xs, TINY_ARCH.gen)
    return adversarial_losses(xt, fake, m["D_t"], TINY_ARCH)[1]


def _encoder(m, xs, xt):
    from .nets import classify, encode
    f = encode(m["Ft"], xs, TINY_ARCH.enc)
    return encoder_objective(f, classify(m["Ct"], f), BATCH_LABELS)


GRAD_CASES = (
    GradCase("encoder_objective", "Ft", _encoder),
    GradCase("relation_consistency_loss", "G_st", lambda m, xs, xt: relation_consistency_loss(
        xs, BATCH_LABELS, m["Fs"], m["Ft_star"], m["G_st"], TINY_ARCH)),
    GradCase("generator_adversarial", "G_st", _gen_adv),
    GradCase("discriminator_adversarial", "D_t", _disc_adv),
    GradCase("cycle_loss", "G_ts", lambda m, xs, xt: cycle_loss(xs, xt, m["G_st"], m["G_ts"], TINY_ARCH)),
    GradCase("appearance_loss", "G_st", lambda m, xs, xt: appearance_loss(xs, xt, m["G_st"], m["G_ts"],
                                                                          TINY_ARCH)),
    GradCase("prediction_consistency_loss", "G_st", lambda m, xs, xt: prediction_consistency_loss(
        xs, m["Fs"], m["Cs"], m["Ft_star"], m["Ct"], m["G_st"], TINY_ARCH)),
    GradCase("batch_all_relation_loss", "G_st", lambda m, xs, xt: batch_all_relation_loss(
        xs, m["Fs"], m["Ft_star"], m["G_st"], TINY_ARCH)),
) + tuple(
    GradCase(f"idreg_{v}", "G_st", lambda m, xs, xt, v=v: idreg_losses(
        v, xs, BATCH_LABELS, m["Fs"], m["Cs"], m["Ft_star"], m["G_st"], TINY_ARCH))
    for v in ("contrastive", "classification", "triplet"))


def _branch(f: Callable[[gc.Tensor], gc.Tensor], v: np.ndarray) -> gc.KinkMonitor:
    with gc.watch_kinks() as kinks:
        f(gc.Tensor(v))
    return kinks


def kink_safe_step(f: Callable[[gc.Tensor], gc.Tensor], vec: np.ndarray, i: int,
                   base: gc.KinkMonitor) -> float:
    """Largest of ``STEPS`` whose stencil points all stay on the smooth branch of ``vec``.

    Roundoff in a central difference scales like eps * |f| / h, so tiny gradient
    entries need the largest step that does not cross a kink.
    """
    for h in STEPS:
        ok = True
        for k in (2, -2, 1, -1):
            probe = vec.copy()
            probe[i] += k * h
            if not base.same_branch(_branch(f, probe)):
                ok = False
                break
        if ok:
            return h
    return STEPS[-1]


def grad_case_error(case: GradCase, seed: int, n_coords: int = 6, h: float | None = None,
                    max_draws: int = 50) -> float:
    """Worst relative error on ``n_coords`` random parameters of one seeded 8-sample batch.

    Draws whose differentiated path passes within ``KINK_MARGIN`` of a ReLU/abs kink are
    redrawn: a central difference straddling a kink measures neither one-sided slope.
    Unless ``h`` is given, each coordinate uses :func:`kink_safe_step`.
    """
    rng = np.random.default_rng(seed)
    shape = (8,) + TINY_ARCH.enc.input_shape
    base = init_models(TINY_ARCH, 4, 4, seed)
    for _ in range(max_draws):
        # jitter every parameter: zero-initialized biases put ReLUs exactly on their kink
        models = {name: {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
                  for name, params in base.items()}
        xs = np.tanh(rng.standard_normal(shape))
        xt = np.tanh(rng.standard_normal(shape))
        vec, unpack = gc.flatten_params(models[case.net])

        def f(v: gc.Tensor) -> gc.Tensor:
            view = dict(models)
            view[case.net] = unpack(v)
            return case.loss(view, xs, xt)

        with gc.watch_kinks() as kinks:
            f(gc.Tensor(vec, requires_grad=True))
        if kinks.margin >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"{case.name}: no kink-free draw in {max_draws} attempts")
    coords = rng.choice(vec.size, size=min(n_coords, vec.size), replace=False)
    return max(gc.finite_diff_check(f, vec, h=h if h else kink_safe_step(f, vec, i, kinks), coords=[i],
                                    order=4) for i in coords)


def gradient_suite(n_batches: int = 100, seed: int = 0, n_coords: int = 6) -> dict[str, float]:
    """Worst error per loss over ``n_batches`` seeded batches."""
    return {case.name: max(grad_case_error(case, seed + b, n_coords) for b in range(n_batches))
            for case in GRAD_CASES}


# ---------------------------------------------------------------- reference versions

def hardest_triplets_reference(features: np.ndarray, labels: np.ndarray) -> tuple[list[int], list[int]]:
    n = len(labels)
    pos, neg = [], []
    for a in range(n):
        best_p, best_n = None, None
        for j in range(n):
            d = float(np.sqrt(((features[a] - features[j]) ** 2).sum()))
            if labels[j] == labels[a] and j != a and (best_p is None or d > best_p[0]):
                best_p = (d, j)
            if labels[j] != labels[a] and (best_n is None or d < best_n[0]):
                best_n = (d, j)
        pos.append(best_p[1])
        neg.append(best_n[1])
    return pos, neg


def dbscan_reference(x: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    n = len(x)
    dist = [[float(np.sqrt(((x[i] - x[j]) ** 2).sum())) for j in range(n)] for i in range(n)]
    nbrs = [[j for j in range(n) if dist[i][j] <= eps] for i in range(n)]
    label = [NOISE] * n
    c = 0
    for i in range(n):
        if label[i] != NOISE or len(nbrs[i]) < min_pts:
            continue
        label[i] = c
        frontier = [i]
        while frontier:
            nxt = []
            for j in frontier:
                if len(nbrs[j]) < min_pts:
                    continue
                for q in nbrs[j]:
                    if label[q] == NOISE:
                        label[q] = c
                        nxt.append(q)
            frontier = nxt
        c += 1
    return np.array(label)


def ap_reference(sim_row, q_id, q_cam, g_ids, g_cams) -> float | None:
    items = [(-sim_row[j], j) for j in range(len(g_ids)) if not (g_ids[j] == q_id and g_cams[j] == q_cam)]
    items.sort()
    hits, total, n_rel = 0, 0.0, 0
    for rank, (_, j) in enumerate(items, 1):
        if g_ids[j] == q_id:
            hits += 1
            total += hits / rank
    n_rel = hits
    return total / n_rel if n_rel else None


def oracle_suite(n: int = 50, seed: int = 0) -> dict[str, int]:
    """Mismatch counts of the fast routines against the reference versions."""
    rng = np.random.default_rng(seed)
    bad = {"hardest_triplets": 0, "dbscan": 0, "rank_and_score": 0}
    for _ in range(n):
        b = int(rng.integers(2, 33))
        labels = rng.integers(0, max(2, b // 3), size=b)
        labels[:2] = [0, 1]
        counts = np.bincount(labels)
        labels = np.concatenate([labels, np.flatnonzero(counts == 1)])
        feats = rng.standard_normal((len(labels), 4))
        t = hardest_triplets(feats, labels)
        ref = hardest_triplets_reference(feats, labels)
        bad["hardest_triplets"] += int(list(t.pos) != ref[0] or list(t.neg) != ref[1])

        x = rng.standard_normal((int(rng.integers(5, 60)), 2))
        eps = float(rng.uniform(0.2, 1.0))
        got = dbscan(x, eps, 3).assignment
        bad["dbscan"] += int(not np.array_equal(got, dbscan_reference(x, eps, 3)))

        nq, ng = int(rng.integers(1, 10)), int(rng.integers(5, 40))
        qf, gf = rng.standard_normal((nq, 3)), rng.standard_normal((ng, 3))
        qi, gi = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
        qc, gc_ = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
        sims = (qf / np.linalg.norm(qf, axis=1, keepdims=True)) @ (
            gf / np.linalg.norm(gf, axis=1, keepdims=True)).T
        aps = [ap_reference(sims[i], qi[i], qc[i], gi, gc_) for i in range(nq)]
        aps = [a for a in aps if a is not None]
        if not aps:
            continue
        got_map = rank_and_score(qf, qi, qc, gf, gi, gc_).mAP
        bad["rank_and_score"] += int(abs(got_map - float(np.mean(aps))) > 1e-12)
    return bad


def run_selftest(n_batches: int = 5, n_oracle: int = 30) -> bool:
    ok = True
    for name, err in gradient_suite(n_batches).items():
        passed = err <= TOLERANCE
        ok &= passed
        log.info("%-28s max rel err %.2e %s", name, err, "ok" if passed else "FAIL")
    for name, count in oracle_suite(n_oracle).items():
        ok &= count == 0
        log.info("%-28s mismatches %d %s", name, count, "ok" if count == 0 else "FAIL")
    return bool(ok)
