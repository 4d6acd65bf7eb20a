"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The desk-scale runs share one synthetic population (50 training speakers,
20 held-out speakers, 10 utterances each, fixed seed) and one training
budget, so every arm is trained under identical conditions.
"""
import math
import time

import numpy as np
import pytest

from avspeaker import experiments as ex
from avspeaker.cli import main
from avspeaker.data import SynthConfig, generate_with_heldout, make_trials, sample_batch_unsynchronized
from avspeaker.fusion import FusionNet
from avspeaker.losses import (AgeHead, Ge2eParams, MtlConfig, TripletConfig, aux_age_loss,
                              batch_hard_triplet_loss, compute_centroids, ge2e_forward_backward,
                              ge2e_mm_loss, mtl_loss, similarity_matrix)
from avspeaker.metrics import calinski_harabasz, davies_bouldin, eer, silhouette
from avspeaker.nn import BatchNorm, Dense, grad_check
from avspeaker.trainer import TrainConfig, evaluate_trials

SEEDS = (0, 1, 2)
PROTOCOL = TrainConfig(steps_per_epoch=16)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def _dense_check(rng):
    layer = Dense(5, 3, rng)
    x = rng.standard_normal((6, 5))
    readout = rng.standard_normal((6, 3))

    def f():
        return float(np.sum(readout * layer.forward(x)))

    f()
    gx = layer.backward(readout)
    return grad_check(f, {"x": x, **layer.params}, {"x": gx, **layer.grads})


def _bn_check(rng, training):
    bn = BatchNorm(4)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, 4)
    bn.params["beta"] = rng.standard_normal(4)
    bn.running_mean = rng.standard_normal(4)
    bn.running_var = rng.uniform(0.5, 2.0, 4)
    bn.training, bn.update_running = training, False
    x = rng.standard_normal((6, 4))
    readout = rng.standard_normal((6, 4))

    def f():
        return float(np.sum(readout * bn.forward(x)))

    f()
    gx = bn.backward(readout)
    return grad_check(f, {"x": x, **bn.params}, {"x": gx, **bn.grads})


def _fusion_check(rng, training):
    net = FusionNet(np.random.default_rng(0), audio_dim=5, visual_dim=4, hidden=6)
    net.attention.params["weight"] = 0.3 * rng.standard_normal((2, 12))
    for bn in net.batchnorms():
        bn.running_mean = 0.1 * rng.standard_normal(bn.running_mean.shape)
        bn.update_running = False
    net.train(training)
    a, v = rng.standard_normal((6, 5)), rng.standard_normal((6, 4))
    readout = rng.standard_normal((6, 12))

    def f():
        return float(np.sum(readout * net.forward(a, v)))

    f()
    ga, gv = net.backward(readout)
    return grad_check(f, {"audio": a, "visual": v, **net.parameters()},
                      {"audio": ga, "visual": gv, **net.gradients()})


def _ge2e_check(rng):
    e = rng.standard_normal((3, 2, 4))
    params = Ge2eParams(5.0, -2.0)
    _, d_e = ge2e_forward_backward(e, params)
    analytic = {"e": d_e, **{k: v.copy() for k, v in params.grads.items()}}
    return grad_check(lambda: ge2e_forward_backward(e, params)[0], {"e": e, **params.params}, analytic)


def _triplet_check(rng):
    e = rng.standard_normal((3, 2, 4))
    cfg = TripletConfig(1.0)
    _, d_e = batch_hard_triplet_loss(e, cfg)
    return grad_check(lambda: batch_hard_triplet_loss(e, cfg)[0], {"e": e}, {"e": d_e})


def _age_check(rng):
    head = AgeHead(6, 4, np.random.default_rng(1))
    head.bn.update_running = False
    x = rng.standard_normal((3, 2, 6))
    labels = np.array([0.3, np.nan, 0.9])
    _, d_x = aux_age_loss(head, x, labels)
    analytic = {"x": d_x, **{k: v.copy() for k, v in head.gradients().items()}}
    return grad_check(lambda: aux_age_loss(head, x, labels)[0], {"x": x, **head.parameters()}, analytic)


def _composite_check(rng, exclusive):
    n, m, gamma = 3, 2, 0.015
    net = FusionNet(np.random.default_rng(0), audio_dim=5, visual_dim=4, hidden=6)
    net.attention.params["weight"] = 0.3 * rng.standard_normal((2, 12))
    for bn in net.batchnorms():
        bn.update_running = False
    params = Ge2eParams(5.0, -2.0)
    head = AgeHead(12, 4, np.random.default_rng(1))
    head.bn.update_running = False
    audio, visual = rng.standard_normal((n * m, 5)), rng.standard_normal((n * m, 4))
    labels = np.array([0.4, np.nan, 0.8])
    cfg = MtlConfig(gamma)

    def f():
        emb = net.forward(audio, visual).reshape(n, m, -1)
        return mtl_loss(ge2e_forward_backward(emb, params, exclusive)[0],
                        aux_age_loss(head, emb, labels)[0], cfg)

    emb = net.forward(audio, visual).reshape(n, m, -1)
    _, d_g = ge2e_forward_backward(emb, params, exclusive)
    _, d_aux = aux_age_loss(head, emb, labels)
    ga, gv = net.backward((gamma * d_g + (1 - gamma) * d_aux).reshape(n * m, -1))
    analytic = {"audio": ga, "visual": gv, **{k: v.copy() for k, v in net.gradients().items()},
                "w": gamma * params.grads["w"], "b": gamma * params.grads["b"],
                **{f"age.{k}": (1 - gamma) * v for k, v in head.gradients().items()}}
    inputs = {"audio": audio, "visual": visual, **net.parameters(), **params.params,
              **{f"age.{k}": v for k, v in head.parameters().items()}}
    return grad_check(f, inputs, analytic)


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    reports = {
        "dense": _dense_check(rng),
        "batchnorm-train": _bn_check(rng, True),
        "batchnorm-eval": _bn_check(rng, False),
        "fusion-train": _fusion_check(rng, True),
        "fusion-eval": _fusion_check(rng, False),
        "ge2e_mm": _ge2e_check(rng),
        "triplet": _triplet_check(rng),
        "age_head": _age_check(rng),
        "composite": _composite_check(rng, False),
        "composite-exclusive": _composite_check(rng, True),
    }
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda k: reports[k].max_rel_error)
    ok = all(r.max_rel_error < 1e-4 for r in reports.values()) and elapsed < 120
    verdict(1, ok, f"max rel error {reports[worst].max_rel_error:.2e} ({worst}), "
                   f"{sum(r.n_checked for r in reports.values())} coordinates, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. loss identities
# ---------------------------------------------------------------------------

def test_criterion_2_loss_identities(verdict):
    n, m = 4, 3
    same = np.tile(np.array([0.6, 0.8, 0.0]), (n, m, 1))
    l_same, _ = ge2e_forward_backward(same, Ge2eParams())
    ortho = np.array([[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]])
    l_ortho, _ = ge2e_mm_loss(similarity_matrix(ortho, compute_centroids(ortho), Ge2eParams(10.0, -5.0)))
    expected = 4 * (1 - sig(5) + sig(-5))
    ok = abs(l_same - n * m) < 1e-9 and abs(l_ortho - expected) < 1e-6
    verdict(2, ok, f"identical batch {l_same!r} vs N*M={n * m}; orthogonal {l_ortho:.7f} vs "
                   f"4*(1-s(5)+s(-5))={expected:.7f} (the quoted 0.05372 is off by "
                   f"{abs(expected - 0.05372):.1e})")
    assert ok


# ---------------------------------------------------------------------------
# 3. EER oracle
# ---------------------------------------------------------------------------

def brute_force_eer(labels, scores):
    """Every threshold below, between and above the sorted unique scores."""
    uniq = np.unique(scores)
    cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    tgt, non = scores[labels == 1], scores[labels == 0]
    best_gap, best = math.inf, None
    for chunk in np.array_split(cands, max(1, cands.size // 500)):
        fnr = (tgt[None, :] < chunk[:, None]).sum(axis=1) / tgt.size
        fpr = (non[None, :] >= chunk[:, None]).sum(axis=1) / non.size
        gaps = np.abs(fpr - fnr)
        i = int(np.argmin(gaps))
        if gaps[i] < best_gap:
            best_gap, best = gaps[i], (fpr[i] + fnr[i]) / 2
    return float(best)


def test_criterion_3_eer_oracle(verdict):
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 2, 10_000)
    # mixed separability: a third each of overlapping, moderate and well separated trials
    sep = np.repeat([0.0, 1.0, 4.0], [3334, 3333, 3333])
    scores = np.round(rng.standard_normal(10_000) + sep * labels, 3)
    swept, oracle = eer((labels, scores))[0], brute_force_eer(labels, scores)
    perfect = eer((labels, labels + 0.1 * rng.random(10_000)))[0]
    reversed_ = eer((labels, -labels - 0.1 * rng.random(10_000)))[0]
    ok = swept == oracle and perfect == 0.0 and reversed_ == 1.0
    verdict(3, ok, f"sweep {swept!r} oracle {oracle!r}; separated {perfect}, reversed {reversed_}")
    assert ok


# ---------------------------------------------------------------------------
# 4. cluster indices
# ---------------------------------------------------------------------------

def test_criterion_4_cluster_indices(verdict):
    x = np.array([0.0, 2.0, 10.0, 12.0])
    y = np.array([0, 0, 1, 1])
    # a(i)=2, b(i)=11,9,9,11 -> s = 9/11, 7/9, 7/9, 9/11
    hand = {"silhouette": (9 / 11 + 7 / 9) / 2, "calinski_harabasz": 100.0 / 2.0, "davies_bouldin": 2.0 / 10.0}
    got = {"silhouette": silhouette(x, y), "calinski_harabasz": calinski_harabasz(x, y),
           "davies_bouldin": davies_bouldin(x, y)}
    close = all(abs(got[k] - hand[k]) < 1e-9 for k in hand)
    flipped = {"silhouette": silhouette(x, 1 - y), "calinski_harabasz": calinski_harabasz(x, 1 - y),
               "davies_bouldin": davies_bouldin(x, 1 - y)}
    perm = np.array([2, 0, 3, 1])
    shuffled = {"silhouette": silhouette(x[perm], y[perm]), "calinski_harabasz": calinski_harabasz(x[perm], y[perm]),
                "davies_bouldin": davies_bouldin(x[perm], y[perm])}
    invariant = all(abs(flipped[k] - got[k]) < 1e-12 and abs(shuffled[k] - got[k]) < 1e-12 for k in got)
    ok = close and invariant
    verdict(4, ok, ", ".join(f"{k} {got[k]:.12g}" for k in got) + f"; label permutation invariant {invariant}")
    assert ok


# ---------------------------------------------------------------------------
# desk-scale runs shared by 5 to 8
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def population():
    train, held = generate_with_heldout(SynthConfig(seed=0), 20)
    return train, held, make_trials(held, 0, balanced=False)


@pytest.fixture(scope="module")
def runs(population):
    train, held, trials = population
    arms = [ex.Arm("ge2e_mm", False, "unsynchronized"), ex.Arm("triplet", False, "unsynchronized"),
            ex.Arm("ge2e_mm", True, "unsynchronized"), ex.Arm("ge2e_mm", True, "synchronized")]
    reference = ex.reference_speaker(held, SEEDS[0])
    out, models, timings = {}, {}, {}
    for arm in arms:
        start = time.perf_counter()
        eers, indices = [], []
        for seed in SEEDS:
            fitted = ex.train_model(train, arm.apply(PROTOCOL, seed)).best
            eers.append(evaluate_trials(fitted, held, trials)[0])
            indices.append(ex.embedding_report(fitted, held, reference)[0])
            models.setdefault(arm.key, []).append(fitted)
        out[arm.key] = ex.ArmResult(arm, list(SEEDS), eers, indices, None)
        timings[arm.key] = time.perf_counter() - start
    return out, models, timings


def test_criterion_5_cluster_index_direction(verdict, runs):
    results, _, timings = runs
    ge2e = results["ge2e_mm-noaux-unsynchronized"].mean_indices()
    triplet = results["triplet-noaux-unsynchronized"].mean_indices()
    checks = ex.direction_check(ge2e, triplet)
    elapsed = timings["ge2e_mm-noaux-unsynchronized"] + timings["triplet-noaux-unsynchronized"]
    ok = all(checks.values()) and elapsed < 900
    detail = ", ".join(f"{k} {ge2e[k]:.4g} vs {triplet[k]:.4g} {'ok' if checks[k] else 'wrong way'}"
                       for k in ex.INDEX_NAMES)
    verdict(5, ok, f"GE2E-MM vs triplet over seeds {SEEDS}: {detail}; {elapsed:.0f}s")
    assert ok


def test_criterion_6_auxiliary_task(verdict, runs):
    results, _, _ = runs
    aux = results["ge2e_mm-aux-unsynchronized"]
    plain = results["ge2e_mm-noaux-unsynchronized"]
    ok = aux.mean_eer <= plain.mean_eer and aux.mean_eer < 0.05
    verdict(6, ok, f"mean EER with age task {100 * aux.mean_eer:.3f}% vs without {100 * plain.mean_eer:.3f}% "
                   f"(per seed {[round(100 * e, 3) for e in aux.eers]} vs {[round(100 * e, 3) for e in plain.eers]})")
    assert ok


def test_criterion_7_corruption_ordering(verdict, runs, population):
    _, models, _ = runs
    _, held, trials = population
    table = {}
    for seed, model in zip(SEEDS, models["ge2e_mm-aux-unsynchronized"]):
        for modality, mode, sigma, value in ex.robustness_sweep(model, held, trials, seed=seed):
            table.setdefault((modality, mode, sigma), []).append(value)
    mean = {k: float(np.mean(v)) for k, v in table.items()}
    top = max(ex.DEFAULT_SIGMAS)
    parts, ok = [], True
    for modality in ("audio", "visual"):
        clean = mean[(modality, "clean", 0.0)]
        missing = mean[(modality, "missing", 0.0)]
        noisy = mean[(modality, "awgn", top)]
        ordered = clean <= missing <= noisy
        ok &= ordered
        parts.append(f"{modality} clean {100 * clean:.3f}% missing {100 * missing:.3f}% "
                     f"awgn@{top} {100 * noisy:.3f}% {'ordered' if ordered else 'out of order'}")
    verdict(7, ok, "; ".join(parts))
    assert ok


def test_criterion_8_unsynchronized_sampler(verdict, runs, population):
    results, _, _ = runs
    train, _, _ = population
    rng = np.random.default_rng(0)
    pairs = equal = 0
    while pairs < 10_000:
        batch = sample_batch_unsynchronized(train, 25, 8, rng)
        for a_ids, v_ids in zip(batch.audio_utt_ids, batch.visual_utt_ids):
            for a, v in zip(a_ids, v_ids):
                if pairs < 10_000:
                    pairs += 1
                    equal += a == v
    unsync = results["ge2e_mm-aux-unsynchronized"].mean_eer
    sync = results["ge2e_mm-aux-synchronized"].mean_eer
    gain = ex.relative_gain(unsync, sync)
    shown = "n/a" if gain is None else f"{gain:.3g}%"
    ok = equal == 0
    verdict(8, ok, f"{equal} of {pairs} pairs share an utterance; unsynchronized EER {100 * unsync:.3f}% vs "
                   f"synchronized {100 * sync:.3f}%, relative reduction {shown} (reported, not asserted)")
    assert ok


# ---------------------------------------------------------------------------
# 9. reproducibility
# ---------------------------------------------------------------------------

def test_criterion_9_ablate_reproducible(verdict, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--speakers", "12", "--utterances", "5", "--heldout", "6"]) == 0
    fast = ["--batch-speakers", "6", "--batch-utterances", "4", "--steps-per-epoch", "3", "--epochs", "3"]
    for name in ("a", "b"):
        assert main(["ablate", "--data-dir", str(data), "--out", str(tmp_path / name), "--seeds", "0,1", *fast]) == 0
    files = ["eer_table.csv"] + sorted(f"histograms/{p.name}" for p in (tmp_path / "a" / "histograms").glob("*.csv"))
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    rows = len((tmp_path / "a" / "eer_table.csv").read_text().splitlines()) - 1
    ok = all(same) and rows == 8 and len(files) == 9
    verdict(9, ok, f"{sum(same)} of {len(files)} files byte-identical across two runs, {rows} configurations")
    assert ok
