"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still shows its measured value.
"""

import shutil
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import TAX5, record
from qcia.corpus import desk_corpus
from qcia.degrade import (
    DatasetManifest,
    ManifestEntry,
    QualityClass,
    QualityTaxonomy,
    degrade,
    enumerate_classes,
)
from qcia.evaluation import (
    SimulationConfig,
    adjacent_accuracy,
    confusion,
    cross_quality_matrix,
    mixed_quality_experiment,
)
from qcia.imageio import Raster, decode_pnm, encode_pnm
from qcia.jpeg import LUMINANCE, CHROMINANCE, STD_LUMINANCE_QT, jpeg_quant_table
from qcia.neuralnet import (
    TrainConfig,
    build_network,
    checkpoint_bytes,
    forward,
    gradcheck_suite,
    load_checkpoint,
    save_checkpoint,
    train,
)
from qcia.qualitynet import (
    LevelScores,
    TypeScores,
    classify_quality,
    fuse_quality,
    level_distance,
    level_label,
    predict_level,
    predict_type,
    type_label,
)
from qcia.routing import Detection, nms

TAX = QualityTaxonomy()


# ------------------------------------------------------------------ 1

def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    results = gradcheck_suite(seed=0, count=20, step=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(r.error for r in results)
    kinds = set().union(*(set(r.kinds) for r in results))
    ok = (worst < 1e-4 and elapsed < 120 and len(results) >= 20
          and {"conv", "maxpool", "relu", "fully_connected", "softmax_output"} <= kinds)
    record(1, ok, f"{len(results)} nets, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok


# ------------------------------------------------------------------ 2

def _overlap_matrix(boxes, thresh):
    x, y, w, h = boxes.T
    ix = np.clip(np.minimum(x[:, None] + w[:, None], x + w) - np.maximum(x[:, None], x), 0, None)
    iy = np.clip(np.minimum(y[:, None] + h[:, None], y + h) - np.maximum(y[:, None], y), 0, None)
    inter = ix * iy
    union = (w * h)[:, None] + w * h - inter
    return inter / union > thresh


def exhaustive_nms(dets, thresh):
    """Enumerate every subset; return the one consistent with greedy suppression."""
    n = len(dets)
    if n == 0:
        return []
    rank = sorted(range(n), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box for i in rank])
    suppresses = _overlap_matrix(boxes, thresh) & np.triu(np.ones((n, n), bool), 1)
    masks = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    # in a greedy result a box is kept exactly when no kept higher-ranked box overlaps it
    hit = (masks.astype(int) @ suppresses.astype(int)) > 0
    consistent = np.all(masks == ~hit, axis=1)
    (only,) = np.nonzero(consistent)
    return [dets[rank[i]] for i in range(n) if masks[only[0], i]]


def test_criterion_02_nms_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    trials, mismatches = 10_000, 0
    for _ in range(trials):
        n = int(rng.integers(0, 9))
        dets = [Detection((float(rng.integers(0, 30)), float(rng.integers(0, 30)),
                           float(rng.integers(1, 20)), float(rng.integers(1, 20))),
                          float(rng.choice([0.2, 0.4, 0.6, 0.8, rng.random()])))
                for _ in range(n)]
        thresh = float(rng.choice([0.3, 0.5, 0.7]))
        mismatches += nms(dets, thresh) != exhaustive_nms(dets, thresh)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record(2, ok, f"{trials} trials, {mismatches} mismatches, {elapsed:.1f}s (< 60s)")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_03_fusion_arithmetic():
    rng = np.random.default_rng(3)
    worst = 0.0
    negative = False
    for _ in range(10_000):
        p = fuse_quality(TypeScores(rng.dirichlet(np.ones(3))), LevelScores("BJ", rng.dirichlet(np.ones(11))),
                         LevelScores("BL", rng.dirichlet(np.ones(11))), TAX)
        worst = max(worst, abs(p.probs.sum() - 1))
        negative |= bool(np.any(p.probs < 0))
    flat = np.full(11, 1 / 11)
    ex1 = fuse_quality(TypeScores([1, 0, 0]), LevelScores("BJ", flat), LevelScores("BL", flat), TAX).probs
    ex2 = fuse_quality(TypeScores([0.2, 0.8, 0]), LevelScores("BJ", np.r_[0, np.full(10, 0.1)]),
                       LevelScores("BL", flat), TAX).probs
    ex3 = fuse_quality(TypeScores([0, 1, 0]), LevelScores("BJ", np.r_[0.2, np.full(10, 0.08)]),
                       LevelScores("BL", flat), TAX).probs
    # "exact" means equal up to one unit of float rounding
    examples = [
        ex1.tolist() == [1.0] + [0.0] * 20,
        ex2[0] == 0.2 and np.allclose(ex2[1:11], 0.08, rtol=0, atol=1e-15) and np.all(ex2[11:] == 0),
        np.allclose(ex3[1:11], 0.1, rtol=0, atol=1e-15) and ex3[0] == 0 and np.all(ex3[11:] == 0),
    ]
    ok = worst <= 1e-6 and not negative and all(examples)
    record(3, ok, f"10000 simplexes, max |sum-1| {worst:.1e} (<= 1e-6), worked examples {sum(examples)}/3")
    assert ok


# ------------------------------------------------------------------ 4

def test_criterion_04_quant_table_law():
    q50 = jpeg_quant_table(LUMINANCE, 50).values
    checks = [np.array_equal(q50, STD_LUMINANCE_QT),
              np.array_equal(jpeg_quant_table(CHROMINANCE, 50).values, CHROMINANCE.values),
              bool(np.all(jpeg_quant_table(LUMINANCE, 100).values == 1)),
              bool(np.all(jpeg_quant_table(CHROMINANCE, 100).values == 1))]
    monotone = True
    for base in (LUMINANCE, CHROMINANCE):
        tables = np.stack([jpeg_quant_table(base, q).values for q in range(1, 101)])
        monotone &= bool(np.all(np.diff(tables, axis=0) <= 0))
    ok = all(checks) and monotone
    record(4, ok, f"Q50 identity and Q100 ones {sum(checks)}/4, monotone over Q=1..100: {monotone}")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_05_severity_monotonicity():
    corpus = desk_corpus(10, seed=0)

    def mae(a, b):
        return float(np.abs(a.pixels.astype(float) - b.pixels.astype(float)).mean())

    rhos = {}
    for fam, m in (("BJ", TAX.m), ("BL", TAX.n)):
        levels = list(range(1, m + 1))
        curve = np.mean([[mae(degrade(it.raster, QualityClass(fam, l), TAX), it.raster) for l in levels]
                         for it in corpus], axis=0)
        rhos[fam] = spearmanr(levels, curve).statistic
    ok = len(corpus) >= 10 and all(r >= 0.9 for r in rhos.values())
    record(5, ok, f"{len(corpus)} images, Spearman BJ {rhos['BJ']:.3f} BL {rhos['BL']:.3f} (>= 0.9)")
    assert ok


# ------------------------------------------------------------------ 6

@pytest.mark.slow
def test_criterion_06_type_prediction(desk_predictor):
    pred = desk_predictor["predictor"]
    imgs, labs = desk_predictor["type_heldout"]
    t0 = time.perf_counter()
    preds = [int(np.argmax(predict_type(pred, r).probs)) for r in imgs]
    acc = float(np.mean(np.array(preds) == np.array([type_label(c) for c in labs])))
    runtime = desk_predictor["type_time"] + time.perf_counter() - t0
    n = desk_predictor["n_type_images"]
    ok = n >= 1000 and acc >= 0.95 and runtime < 20 * 60
    record(6, ok, f"{n} images ({len(imgs)} held out), type accuracy {acc:.3f} (>= 0.95), {runtime:.0f}s (< 1200s)")
    assert ok


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_criterion_07_level_near_diagonal(desk_predictor):
    pred = desk_predictor["predictor"]
    t0 = time.perf_counter()
    parts, ok = [], True
    train_time = 0.0
    for fam in ("BJ", "BL"):
        _, _, (imgs, labs), t_train = desk_predictor["level"][fam]
        train_time += t_train
        truth = [level_label(c, fam) for c in labs]
        preds = [int(np.argmax(predict_level(pred, r, fam).probs)) for r in imgs]
        cm = confusion(preds, truth, 1 + TAX5.m)
        adj, exact = adjacent_accuracy(cm, 1), cm.accuracy()
        ok &= adj >= 0.9
        parts.append(f"{fam} adjacent {adj:.3f} exact {exact:.3f}")
    runtime = train_time + time.perf_counter() - t0
    ok &= runtime < 30 * 60
    record(7, ok, f"{', '.join(parts)} (>= 0.90), {runtime:.0f}s (< 1800s)")
    assert ok


@pytest.mark.slow
def test_mixed_set_classification_within_one_level(desk_predictor):
    pred = desk_predictor["predictor"]
    close = [level_distance(classify_quality(pred, r)[0], c) <= 1 for r, c in desk_predictor["mixed"]]
    assert np.mean(close) >= 0.85


# ------------------------------------------------------------------ 8

def test_criterion_08_routing_ordering():
    t0 = time.perf_counter()
    parts, ok = [], True
    for task in ("detect", "recognize"):
        rep = mixed_quality_experiment(SimulationConfig(task=task, items=600, seed=0))
        m = rep.metrics
        tol = 0.01
        checks = [
            m["standard"] < m["mixed_trained"] < m["oracle_routed"],
            m["routed_K3"] >= m["mixed_trained"],
            m["routed_K1"] <= m["routed_K3"] + tol and m["routed_K3"] <= m["routed_K5"] + tol,
        ]
        ok &= all(checks)
        parts.append(f"{task}: std {m['standard']:.3f} < mixed {m['mixed_trained']:.3f} < oracle "
                     f"{m['oracle_routed']:.3f}; K1/3/5 {m['routed_K1']:.3f}/{m['routed_K3']:.3f}/{m['routed_K5']:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    record(8, ok, f"600 items; {'; '.join(parts)}; {elapsed:.0f}s (< 300s)")
    assert ok


# ------------------------------------------------------------------ 9

def test_criterion_09_cross_quality_dominance():
    t0 = time.perf_counter()
    parts, ok = [], True
    for task in ("detect", "recognize"):
        rep = cross_quality_matrix(SimulationConfig(task=task, items_per_cell=60, seed=0))
        mat = np.array(rep.tables["matrix"])
        rows = int(sum(np.all(mat[i, i] >= mat[i]) for i in range(len(mat))))
        ok &= rows == len(mat)
        parts.append(f"{task} {rows}/{len(mat)} rows")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    record(9, ok, f"diagonal dominance {', '.join(parts)}, {elapsed:.0f}s (< 120s)")
    assert ok


# ----------------------------------------------------------------- 10

def test_criterion_10_determinism_and_round_trips(tmp_path, monkeypatch):
    from test_cli import digests, run_pipeline

    checks = {}
    # checkpoint bit-exactness and resume equivalence
    from test_neuralnet import toy_arch, toy_set

    data = toy_set(80)
    cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
    net, _ = train(build_network(toy_arch(), 0), data, cfg)
    save_checkpoint(net, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    checks["checkpoint bit-exact"] = (checkpoint_bytes(back) == (tmp_path / "a.ckpt").read_bytes()
                                      and np.array_equal(forward(back, data[0]), forward(net, data[0])))
    resumed, _ = train(back, data, cfg)
    straight, _ = train(build_network(toy_arch(), 0), data, TrainConfig(epochs=2, batch_size=16, seed=3))
    checks["resume-equivalent"] = all(np.array_equal(a, b) for a, b in zip(resumed.weights, straight.weights))

    # image and manifest round trips
    rng = np.random.default_rng(10)
    pnm_ok = True
    for ch in (1, 3):
        r = Raster(rng.integers(0, 256, (13, 17, ch), dtype=np.uint8))
        pnm_ok &= decode_pnm(encode_pnm(r)) == r
    checks["PGM/PPM round trip"] = pnm_ok
    m = DatasetManifest([ManifestEntry(f"x{i}.pgm", c, [[1.0, 2.0, 3.0, 4.0]], i)
                         for i, c in enumerate(enumerate_classes(TAX))], 5, TAX)
    m.save(tmp_path / "m.json")
    checks["manifest round trip"] = DatasetManifest.read(tmp_path / "m.json") == m

    # every CLI subcommand, run twice from scratch in the same work dir
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    run_pipeline(work)
    first = digests(work)
    for child in work.iterdir():
        if child.name != "run.json":
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    run_pipeline(work)
    checks["CLI byte-identical"] = first == digests(work) and len(first) > 20

    ok = all(checks.values())
    record(10, ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items())
           + f" ({len(first)} artifacts)")
    assert ok
