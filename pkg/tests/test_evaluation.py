import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcia.degrade import BJ, BL, G, ManifestEntry, QualityTaxonomy, enumerate_classes
from qcia.errors import EmptyTestSet, IncompleteInputs, LengthMismatch, MissingGroundTruth
from qcia.evaluation import (
    ConfusionMatrix,
    ExperimentReport,
    SimulatedPredictor,
    SimulationConfig,
    SyntheticAnalyzerProfile,
    accuracy,
    adjacent_accuracy,
    average_precision,
    confusion,
    cross_quality_matrix,
    matrix_csv,
    mean_ap,
    mixed_quality_experiment,
    quality_distance,
    simulate_analyzer,
    synthetic_items,
    task_metric,
)
from qcia.routing import Detection, Sample

TAX = QualityTaxonomy()

# published level-estimation confusion counts (rows true, columns predicted);
# index 0 is the uncompressed / full-resolution class
JPEG_COUNTS = [
    [2000, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [11, 1688, 194, 105, 0, 0, 0, 0, 0, 0, 0],
    [0, 153, 1653, 157, 37, 0, 0, 0, 0, 0, 0],
    [0, 9, 346, 1580, 65, 0, 0, 0, 0, 0, 0],
    [0, 9, 31, 102, 1649, 209, 0, 0, 0, 0, 0],
    [0, 0, 0, 11, 105, 1651, 233, 0, 0, 0, 0],
    [0, 0, 0, 0, 8, 159, 1694, 139, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 64, 1910, 26, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 35, 1798, 167, 0],
    [0, 0, 0, 0, 0, 0, 0, 21, 105, 1853, 21],
    [0, 0, 8, 4, 0, 4, 0, 1, 0, 143, 1840],
]
DOWNSAMPLE_COUNTS = [
    [2000, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [9, 1901, 64, 20, 6, 0, 0, 0, 0, 0, 0],
    [3, 69, 1891, 31, 6, 0, 0, 0, 0, 0, 0],
    [0, 0, 64, 1853, 76, 5, 0, 0, 0, 0, 0],
    [0, 1, 0, 41, 1899, 58, 1, 0, 0, 0, 0],
    [0, 0, 0, 5, 61, 1907, 21, 6, 0, 0, 0],
    [0, 0, 0, 0, 0, 62, 1913, 25, 0, 0, 0],
    [0, 0, 0, 0, 0, 26, 54, 1867, 53, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 59, 1895, 46, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 61, 1897, 42],
    [0, 0, 0, 0, 0, 0, 0, 0, 37, 42, 1921],
]


def D(box, score):
    return Detection(box, score)


# ------------------------------------------------------------------ AP

def test_ap_examples():
    gt = {"a": [(0, 0, 10, 10)]}
    assert average_precision([("a", D((0, 0, 10, 10), 0.9))], gt) == 1.0
    tp, fp = D((0, 0, 10, 10), 0.9), D((50, 50, 5, 5), 0.5)
    assert average_precision([("a", tp), ("a", fp)], gt) == 1.0
    tp, fp = D((0, 0, 10, 10), 0.5), D((50, 50, 5, 5), 0.9)
    assert average_precision([("a", tp), ("a", fp)], gt) == 0.5


def test_ap_edge_cases():
    assert average_precision([], {"a": [(0, 0, 4, 4)]}) == 0.0
    assert average_precision([("a", D((0, 0, 4, 4), 0.5))], {"a": []}) == 0.0
    # a duplicate of a matched box is a false positive
    gt = {"a": [(0, 0, 10, 10)]}
    dets = [("a", D((0, 0, 10, 10), 0.9)), ("a", D((0, 0, 10, 10), 0.8))]
    assert average_precision(dets, gt) == 1.0


def brute_force_ap(dets, gts, thresh=0.5):
    """Sweep every score threshold, match greedily, integrate the envelope."""
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score)
    points = []
    for cut in range(1, len(order) + 1):
        used = {k: set() for k in gts}
        tp = 0
        for i in order[:cut]:
            img, d = dets[i]
            cands = [(iou_(d.box, b), g) for g, b in enumerate(gts[img]) if g not in used[img]]
            cands = [c for c in cands if c[0] >= thresh]
            if cands:
                used[img].add(max(cands, key=lambda c: (c[0], -c[1]))[1])
                tp += 1
        points.append((tp / n_gt, tp / cut))
    ap, prev_r = 0.0, 0.0
    for r in sorted({p[0] for p in points}):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def iou_(a, b):
    from qcia.routing import iou
    return iou(a, b)


def random_fixture(rng, n_dets):
    gts = {k: [tuple(float(v) for v in rng.integers(0, 30, 2)) + (10.0, 10.0)] for k in "ab"}
    dets = []
    for _ in range(n_dets):
        img = str(rng.choice(list("ab")))
        x, y = gts[img][0][:2] if rng.random() < 0.5 else rng.integers(0, 40, 2)
        dets.append((img, D((float(x) + rng.integers(-3, 4), float(y), 10.0, 10.0), float(rng.random()))))
    return dets, gts


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_ap_matches_brute_force(seed, n):
    dets, gts = random_fixture(np.random.default_rng(seed), n)
    ap = average_precision(dets, gts)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(brute_force_ap(dets, gts) if dets else 0.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([np.sqrt, lambda s: s ** 3, lambda s: 0.5 * s + 0.1]))
def test_ap_rank_invariance(seed, f):
    dets, gts = random_fixture(np.random.default_rng(seed), 6)
    moved = [(img, D(d.box, float(f(d.score)))) for img, d in dets]
    assert average_precision(moved, gts) == average_precision(dets, gts)


def test_mean_ap_examples():
    gts = {"a": [(0, 0, 10, 10)], "b": [(5, 5, 10, 10), (40, 40, 8, 8)], "c": []}
    perfect = {k: [D(b, 0.9) for b in v] for k, v in gts.items()}
    assert mean_ap(perfect, gts) == 1.0
    assert mean_ap({}, gts) == 0.0
    with pytest.raises(EmptyTestSet):
        mean_ap({}, {})


def test_mean_ap_hand_fixture():
    # three images, three faces. Ranked detections:
    # 0.9 a TP, 0.8 c FP, 0.7 b TP, 0.6 b FP (dup), 0.5 b TP
    # precision/recall: (1,1/3) (1/2,1/3) (2/3,2/3) (1/2,2/3) (3/5,1)
    # envelope: 1 on (0,1/3], 2/3 on (1/3,2/3], 3/5 on (2/3,1]
    gts = {"a": [(0, 0, 10, 10)], "b": [(0, 0, 10, 10), (50, 50, 10, 10)], "c": []}
    res = {
        "a": [D((0, 0, 10, 10), 0.9)],
        "b": [D((1, 0, 10, 10), 0.7), D((0, 1, 10, 10), 0.6), D((50, 50, 10, 10), 0.5)],
        "c": [D((0, 0, 10, 10), 0.8)],
    }
    expected = (1 / 3) * 1 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 5)
    assert mean_ap(res, gts) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------- accuracy/confusion

def test_accuracy_and_confusion_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    cm = confusion([0, 1, 1], [0, 1, 0], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 1]]
    assert confusion([2, 0, 1], [2, 0, 1], 3).counts.tolist() == np.eye(3, dtype=int).tolist()


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        accuracy([0, 1], [0])
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0], 2)
    with pytest.raises(EmptyTestSet):
        accuracy([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    preds, truth = zip(*pairs)
    cm = confusion(preds, truth, 5)
    assert cm.supports().tolist() == [truth.count(k) for k in range(5)]
    assert cm.accuracy() == pytest.approx(accuracy(preds, truth))
    assert adjacent_accuracy(cm, 4) == 1.0
    assert adjacent_accuracy(cm, 0) == pytest.approx(accuracy(preds, truth))


def test_confusion_csv():
    cm = confusion([0, 1, 1], [0, 1, 0], 2, labels=["G", "BJ1"])
    assert cm.to_csv() == "true\\pred,G,BJ1\nG,1,1\nBJ1,0,1\n"


def test_adjacent_examples():
    assert adjacent_accuracy(ConfusionMatrix(np.diag([3, 4, 5])), 0) == 1.0
    cm = ConfusionMatrix([[1, 2, 3], [0, 1, 0], [4, 0, 1]])
    assert adjacent_accuracy(cm, 1) == pytest.approx(5 / 12)
    assert adjacent_accuracy(cm, 2) == 1.0
    with pytest.raises(ValueError):
        adjacent_accuracy(ConfusionMatrix(np.ones((2, 3))), 1)


def test_published_level_confusions():
    jpeg, down = ConfusionMatrix(JPEG_COUNTS), ConfusionMatrix(DOWNSAMPLE_COUNTS)
    # printed rows do not all sum to 2000; totals are taken as printed
    assert jpeg.counts.sum() == 21998 and down.counts.sum() == 21998
    assert round(jpeg.accuracy(), 3) == 0.878 and round(down.accuracy(), 3) == 0.952
    assert adjacent_accuracy(jpeg, 1) == pytest.approx(21750 / 21998, abs=1e-15)
    assert adjacent_accuracy(down, 1) == pytest.approx(21882 / 21998, abs=1e-15)
    # the JPEG matrix keeps 98.9% of its mass within one level, short of 99%
    assert 0.988 < adjacent_accuracy(jpeg, 1) < 0.99
    assert adjacent_accuracy(down, 1) >= 0.99
    assert adjacent_accuracy(jpeg, 10) == 1.0


# ---------------------------------------------------- synthetic analyzers

def entry(c=G, boxes=((10.0, 12.0, 30.0, 36.0),), identity=3, source="s0"):
    return ManifestEntry(f"{source}_{c.tag}.pgm", c, [list(b) for b in boxes], identity, source=source)


def test_quality_distance():
    assert quality_distance(BJ(2), BJ(2), TAX) == 0
    assert quality_distance(BJ(2), BJ(7), TAX) == 5
    assert quality_distance(BJ(2), BL(2), TAX) == 10
    assert quality_distance(G, BL(1), TAX) == 10


def test_degenerate_profile_emits_exact_box():
    prof = SyntheticAnalyzerProfile(G, TAX, hit_base=1.0, hit_slope=0.01, sigma_base=0.0, sigma_slope=0.0,
                                    fp_base=0.0)
    out = simulate_analyzer(prof, Sample(entry=entry(), width=96, height=96))
    assert len(out) == 1 and out[0].box == (10.0, 12.0, 30.0, 36.0)


def test_simulation_deterministic():
    prof = SyntheticAnalyzerProfile(BJ(3), TAX, seed=4)
    s = Sample(entry=entry(BJ(5)), width=96, height=96)
    assert simulate_analyzer(prof, s) == simulate_analyzer(prof, s)
    a = simulate_analyzer(prof, s, "recognize")
    assert np.array_equal(a, simulate_analyzer(prof, s, "recognize"))
    assert a.shape == (10,) and a.sum() == pytest.approx(1.0)


def test_simulated_boxes_in_bounds_and_scored():
    prof = SyntheticAnalyzerProfile(BL(9), TAX, fp_base=0.5)
    for k in range(50):
        for d in simulate_analyzer(prof, Sample(entry=entry(BJ(1), source=f"s{k}"), width=64, height=64)):
            x, y, w, h = d.box
            assert 0 <= x and 0 <= y and x + w <= 64 and y + h <= 64 and 0 <= d.score <= 1


def test_missing_ground_truth():
    prof = SyntheticAnalyzerProfile(G, TAX)
    with pytest.raises(MissingGroundTruth):
        simulate_analyzer(prof, Sample())
    with pytest.raises(MissingGroundTruth):
        simulate_analyzer(prof, Sample(entry=ManifestEntry("x", G)))
    with pytest.raises(MissingGroundTruth):
        simulate_analyzer(prof, Sample(entry=ManifestEntry("x", G, [[1, 1, 4, 4]])), "recognize")


def test_profile_invariants():
    with pytest.raises(ValueError):
        SyntheticAnalyzerProfile(G, TAX, hit_slope=0.0)
    with pytest.raises(ValueError):
        SyntheticAnalyzerProfile(None, TAX)
    prof = SyntheticAnalyzerProfile(G, TAX)
    rates = [prof.hit_rate(d) for d in range(11)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[0] == 0.97 and prof.sigma(2) == 3.0 and prof.fp_rate(1) == pytest.approx(0.1)
    back = SyntheticAnalyzerProfile.from_json(json.loads(json.dumps(prof.to_json())), TAX)
    assert back == prof


def test_matched_beats_distant_over_200_items():
    tax = TAX
    items = synthetic_items(200, tax, seed=1, classes=[BJ(1)] * 200)
    near = SyntheticAnalyzerProfile(BJ(1), tax, seed=1)
    far = SyntheticAnalyzerProfile(BJ(6), tax, seed=1)
    m_near = task_metric("detect", [simulate_analyzer(near, s) for s in items], items)
    m_far = task_metric("detect", [simulate_analyzer(far, s) for s in items], items)
    assert m_near > m_far


def test_simulated_predictor():
    pred = SimulatedPredictor(TAX, seed=2)
    s = Sample(entry=entry(BL(4)))
    p = pred(s)
    assert np.array_equal(p.probs, pred(s).probs)
    assert abs(p.probs.sum() - 1) < 1e-9
    sharp = SimulatedPredictor(TAX, sharpness=50.0, noise=0.0)
    assert sharp(s).argmax() == BL(4)


# ------------------------------------------------------------- drivers

SMALL = QualityTaxonomy((20,), (16,))


def test_cross_matrix_small_is_diagonal_dominant():
    rep = cross_quality_matrix(SimulationConfig(taxonomy=QualityTaxonomy((20,), ()), items_per_cell=150, seed=3))
    m = np.array(rep.tables["matrix"])
    assert m.shape == (2, 2)
    assert m[0, 0] > m[0, 1] and m[1, 1] > m[1, 0]
    assert rep.passed()


def test_cross_matrix_constant_profile():
    tax = SMALL
    flat = {c: SyntheticAnalyzerProfile(c, tax, hit_base=0.9, hit_slope=1e-9, sigma_slope=0.0, fp_base=0.05,
                                        score_slope=0.0) for c in enumerate_classes(tax)}
    rep = cross_quality_matrix(SimulationConfig(taxonomy=tax, items_per_cell=300, seed=1), profiles=flat)
    m = np.array(rep.tables["matrix"])
    # rows share no draws, so the spread is pure Monte-Carlo noise
    assert m.max() - m.min() < 0.08
    # columns see identical draws for a given model, so each row is exactly constant
    assert np.all(m == m[:, :1])


def test_cross_matrix_incomplete():
    with pytest.raises(IncompleteInputs):
        cross_quality_matrix(SimulationConfig(taxonomy=SMALL), profiles={G: SyntheticAnalyzerProfile(G, SMALL)})


def test_report_round_trip(tmp_path):
    rep = cross_quality_matrix(SimulationConfig(taxonomy=SMALL, items_per_cell=20, task="recognize"))
    p = tmp_path / "r.json"
    rep.write(p)
    back = ExperimentReport.read(p)
    assert back == rep
    assert back.dumps() == rep.dumps()
    assert "runtime" not in p.read_text()
    assert rep.metrics_csv().splitlines()[0] == "setting,metric"


def test_matrix_csv():
    text = matrix_csv([[1.0, 0.5]], ["G"], ["G", "BJ1"])
    assert text == "train\\test,G,BJ1\nG,1.0,0.5\n"


def test_mixed_experiment_deterministic_and_ordered():
    cfg = SimulationConfig(taxonomy=SMALL, items=300, seed=5, ks=(1, 3))
    a, b = mixed_quality_experiment(cfg), mixed_quality_experiment(cfg)
    assert a == b and a.dumps() == b.dumps()
    m = a.metrics
    assert {"standard", "mixed_trained", "oracle_routed", "predictor_accuracy", "routed_K1", "routed_K3"} <= set(m)
    assert m["oracle_routed"] >= m["standard"]


def test_mixed_experiment_recognition_runs():
    rep = mixed_quality_experiment(SimulationConfig(task="recognize", taxonomy=SMALL, items=200, seed=2, ks=(1, 2)))
    assert all(0 <= v <= 1 for v in rep.metrics.values())


def test_mixed_experiment_rejects_unlabelled():
    with pytest.raises(IncompleteInputs):
        mixed_quality_experiment(SimulationConfig(taxonomy=SMALL), items=[])
    with pytest.raises(IncompleteInputs):
        mixed_quality_experiment(SimulationConfig(taxonomy=SMALL), items=[Sample()])


def test_oracle_beats_every_fixed_model():
    tax = QualityTaxonomy((20, 10), (16, 8))
    items = synthetic_items(400, tax, seed=7)
    from qcia.evaluation import synthetic_registry
    reg = synthetic_registry("detect", tax, seed=7)
    oracle = task_metric("detect", [reg[s.entry.quality_class](s) for s in items], items)
    for c in enumerate_classes(tax):
        assert oracle >= task_metric("detect", [reg[c](s) for s in items], items)
