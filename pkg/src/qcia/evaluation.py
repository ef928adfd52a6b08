"""Metrics, synthetic analyzers and the experiment drivers.

The synthetic analyzers stand in for per-quality detectors and recognizers:
their hit rate falls with the distance between the quality they were "trained"
on and the quality of the image they see, which is the behaviour the routing
framework is built to exploit.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .degrade import (
    DatasetManifest,
    ManifestEntry,
    QualityClass,
    QualityTaxonomy,
    assign_mixed_classes,
    enumerate_classes,
)
from .errors import EmptyTestSet, IncompleteInputs, LengthMismatch, MissingGroundTruth
from .qualitynet import FusedQualityVector, level_distance
from .routing import (
    AnalyzerRegistry,
    Detection,
    RoutingConfig,
    Sample,
    analyze,
    iou,
    nms,
)

# ------------------------------------------------------------- metrics ----


def average_precision(dets, gts: Mapping[Any, Sequence], iou_thresh: float = 0.5) -> float:
    """All-points interpolated AP.

    ``dets`` is a sequence of ``(image_id, Detection)``; ``gts`` maps image
    ids to ground-truth boxes. Each detection, in descending score order,
    claims the unmatched ground truth of its image with the highest IoU, if
    that IoU reaches ``iou_thresh``.
    """
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score)
    used = {k: [False] * len(v) for k, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, det = dets[i]
        boxes = gts.get(img, ())
        best, best_iou = -1, iou_thresh
        for g, box in enumerate(boxes):
            if used[img][g]:
                continue
            o = iou(det.box, box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = g, o
        if best >= 0:
            used[img][best] = True
            tp[rank] = 1.0
    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(results: Mapping[Any, Sequence[Detection]], gts: Mapping[Any, Sequence], iou_thresh: float = 0.5) -> float:
    """Single-class mAP: AP over the pooled test set."""
    if not gts:
        raise EmptyTestSet("no test images")
    pooled = [(img, d) for img in gts for d in results.get(img, ())]
    return average_precision(pooled, gts, iou_thresh)


def accuracy(preds, truth) -> float:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise LengthMismatch(f"{preds.shape} predictions vs {truth.shape} labels")
    if preds.size == 0:
        raise EmptyTestSet("no samples")
    return float(np.mean(preds == truth))


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    labels: Optional[list] = None

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or np.any(c < 0):
            raise ValueError("confusion counts must be a nonnegative 2-D grid")
        self.counts = c

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def to_csv(self) -> str:
        labels = self.labels or [str(i) for i in range(self.size)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(labels))
        for lab, row in zip(labels, self.counts):
            w.writerow([lab] + [int(v) for v in row])
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion(preds, truth, L: int, labels=None) -> ConfusionMatrix:
    preds, truth = np.asarray(preds, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise LengthMismatch(f"{preds.shape} predictions vs {truth.shape} labels")
    counts = np.zeros((L, L), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts, labels)


def adjacent_accuracy(cm: ConfusionMatrix, radius: int) -> float:
    """Fraction of samples predicted within ``radius`` classes of the truth."""
    c = cm.counts
    if c.shape[0] != c.shape[1]:
        raise ValueError("adjacent accuracy needs a square matrix")
    i, j = np.indices(c.shape)
    return float(c[np.abs(i - j) <= radius].sum() / c.sum())


# ------------------------------------------------- synthetic analyzers ----


def quality_distance(model: QualityClass, true: QualityClass, tax: QualityTaxonomy) -> int:
    """Same family: level gap. Family mismatch or G versus degraded: max(m, n)."""
    if model == true:
        return 0
    if model.kind == true.kind and model.kind != "G":
        return abs(model.level - true.level)
    return max(tax.m, tax.n)


@dataclass(frozen=True)
class SyntheticAnalyzerProfile:
    """Seeded stand-in for a detector/recognizer trained on ``model_class``.

    ``hit_rate(d) = clamp(hit_base - hit_slope*d, hit_floor, 1)``,
    ``sigma(d) = sigma_base + sigma_slope*d`` pixels and
    ``fp_rate(d) = fp_base*(1 + d)`` spurious boxes per image. True-box
    scores are drawn from ``[0.6, 1.0] - score_slope*d``, so a better matched
    model is also the more confident one when boxes meet in NMS. A ``mixed``
    profile uses the mean of each curve over d = 0..d_max for every input.
    """

    model_class: Optional[QualityClass] = None
    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)
    hit_base: float = 0.97
    hit_slope: float = 0.08
    hit_floor: float = 0.2
    sigma_base: float = 1.0
    sigma_slope: float = 1.0
    fp_base: float = 0.05
    score_slope: float = 0.06
    n_identities: int = 10
    seed: int = 0
    mixed: bool = False

    def __post_init__(self):
        if not self.mixed:
            if self.model_class is None:
                raise ValueError("a non-mixed profile needs a model class")
            self.taxonomy.validate(self.model_class)
            rates = [self._hit(d) for d in range(self.d_max + 1)]
            if any(a <= b for a, b in zip(rates, rates[1:])):
                raise ValueError(f"hit_rate must be strictly decreasing in d over 0..{self.d_max}: {rates}")
        for d in range(self.d_max + 1):
            if (not 0.0 <= self.hit_rate(d) <= 1.0 or self.fp_rate(d) < 0 or self.sigma(d) < 0
                    or not 0.0 <= self.score_shift(d) <= 0.6):
                raise ValueError("profile rates out of range")

    @property
    def d_max(self) -> int:
        return max(self.taxonomy.m, self.taxonomy.n)

    def _hit(self, d: float) -> float:
        return float(min(max(self.hit_base - self.hit_slope * d, self.hit_floor), 1.0))

    def _curve_mean(self, fn) -> float:
        return float(np.mean([fn(d) for d in range(self.d_max + 1)]))

    def hit_rate(self, d: float) -> float:
        if self.mixed:
            return self._curve_mean(self._hit)
        return self._hit(d)

    def sigma(self, d: float) -> float:
        f = lambda x: self.sigma_base + self.sigma_slope * x
        return self._curve_mean(f) if self.mixed else f(d)

    def fp_rate(self, d: float) -> float:
        f = lambda x: self.fp_base * (1 + x)
        return self._curve_mean(f) if self.mixed else f(d)

    def score_shift(self, d: float) -> float:
        f = lambda x: self.score_slope * x
        return self._curve_mean(f) if self.mixed else f(d)

    def distance(self, true: QualityClass) -> int:
        if self.mixed:
            return 0
        return quality_distance(self.model_class, true, self.taxonomy)

    @property
    def stream_id(self) -> int:
        if self.mixed:
            return 100_000
        return self.taxonomy.index(self.model_class)

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("model_class", "taxonomy")}
        if self.model_class is not None:
            out["model_class"] = self.model_class.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict, taxonomy: QualityTaxonomy, model_class: Optional[QualityClass] = None) -> "SyntheticAnalyzerProfile":
        kw = dict(obj)
        if "model_class" in kw:
            kw["model_class"] = QualityClass.from_json(kw["model_class"])
        elif model_class is not None:
            kw["model_class"] = model_class
        return cls(taxonomy=taxonomy, **kw)


def _item_key(entry: ManifestEntry) -> int:
    key = entry.source if entry.source is not None else entry.path
    return zlib.crc32(key.encode("utf-8"))


def simulate_analyzer(profile: SyntheticAnalyzerProfile, sample: Sample, task: str = "detect"):
    """Deterministic draw for one (profile, item) pair.

    The random stream depends on the profile seed, the model class and the
    item's source key, not on the item's quality class, so one model's
    outputs on differently degraded copies of an image share their draws.
    """
    entry = sample.entry
    if entry is None:
        raise MissingGroundTruth("synthetic analyzers need a labelled entry")
    d = profile.distance(entry.quality_class)
    rng = np.random.default_rng([profile.seed, profile.stream_id, _item_key(entry)])
    hit = profile.hit_rate(d)
    if task == "recognize":
        if entry.identity is None:
            raise MissingGroundTruth(f"{entry.path} has no identity label")
        logits = rng.standard_normal(profile.n_identities)
        if rng.random() < hit:
            logits[entry.identity] = logits.max() + 0.5 + 2.0 * hit
        z = np.exp(logits - logits.max())
        return z / z.sum()
    if entry.boxes is None:
        raise MissingGroundTruth(f"{entry.path} has no boxes")
    width = sample.width or 1 << 16
    height = sample.height or 1 << 16
    sigma = profile.sigma(d)
    out = []
    for box in entry.boxes:
        u = rng.random()
        jitter = rng.standard_normal(4) * sigma
        score = rng.uniform(0.6, 1.0) - profile.score_shift(d)
        if u < hit:
            x, y, w, h = box
            cand = (x + jitter[0], y + jitter[1], max(w + jitter[2], 1.0), max(h + jitter[3], 1.0))
            out.append(Detection(cand, score).clamped(width, height))
    for _ in range(rng.poisson(profile.fp_rate(d))):
        w = rng.uniform(0.1, 0.4) * width
        h = rng.uniform(0.1, 0.4) * height
        x = rng.uniform(0, width - w)
        y = rng.uniform(0, height - h)
        out.append(Detection((x, y, w, h), rng.uniform(0.05, 0.5)).clamped(width, height))
    return out


class SyntheticAnalyzer:
    """Callable analyzer wrapping a profile, usable inside a registry."""

    def __init__(self, profile: SyntheticAnalyzerProfile, task: str = "detect"):
        self.profile = profile
        self.task = task

    def __call__(self, sample: Sample):
        return simulate_analyzer(self.profile, sample, self.task)


def synthetic_registry(task: str, tax: QualityTaxonomy, seed: int = 0, **profile_kw) -> AnalyzerRegistry:
    entries = {
        c: SyntheticAnalyzer(SyntheticAnalyzerProfile(c, tax, seed=seed, **profile_kw), task)
        for c in enumerate_classes(tax)
    }
    return AnalyzerRegistry(task, entries, tax)


@dataclass(frozen=True)
class SimulatedPredictor:
    """Stand-in quality predictor that blurs the true class over its neighbours.

    Logits are ``-sharpness * level_distance(true, c) + noise * Gumbel`` with
    cross-family classes placed ``max(m, n) + 1`` levels away; P_C is their
    softmax. Draws are keyed like :func:`simulate_analyzer`.
    """

    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)
    sharpness: float = 1.5
    noise: float = 1.0
    seed: int = 0

    def __call__(self, sample: Sample) -> FusedQualityVector:
        entry = sample.entry
        if entry is None:
            raise MissingGroundTruth("the simulated predictor needs a labelled entry")
        far = max(self.taxonomy.m, self.taxonomy.n) + 1
        classes = enumerate_classes(self.taxonomy)
        dist = np.array([min(level_distance(entry.quality_class, c), far) for c in classes], dtype=np.float64)
        rng = np.random.default_rng([self.seed, 200_000, _item_key(entry)])
        logits = -self.sharpness * dist + self.noise * rng.gumbel(size=len(classes))
        z = np.exp(logits - logits.max())
        return FusedQualityVector(z / z.sum(), self.taxonomy)


# ------------------------------------------------------------- reports ----


@dataclass
class ExperimentReport:
    name: str
    seed: int
    metrics: dict
    assertions: dict
    config: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    runtime: float = field(default=0.0, compare=False)

    def passed(self) -> bool:
        return all(self.assertions.values())

    def to_json(self, include_runtime: bool = False) -> dict:
        out = {
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "assertions": self.assertions,
            "tables": self.tables,
        }
        if include_runtime:
            out["runtime_s"] = self.runtime
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentReport":
        return cls(obj["name"], obj["seed"], obj["metrics"], obj["assertions"],
                   obj.get("config", {}), obj.get("tables", {}), obj.get("runtime_s", 0.0))

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "metric"])
        for k in sorted(self.metrics):
            w.writerow([k, repr(float(self.metrics[k]))])
        return buf.getvalue()


def matrix_csv(matrix, row_labels, col_labels, corner="train\\test") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner] + list(col_labels))
    for lab, row in zip(row_labels, matrix):
        w.writerow([lab] + [repr(float(v)) for v in row])
    return buf.getvalue()


# ------------------------------------------------------------- drivers ----


def synthetic_items(n: int, tax: QualityTaxonomy, seed: int, size: int = 96, n_identities: int = 10,
                    classes: Optional[Sequence[QualityClass]] = None) -> list[Sample]:
    """Pixel-free labelled items: one face box and identity per item."""
    rng = np.random.default_rng([seed, 300_000])
    if classes is None:
        classes = assign_mixed_classes(n, tax, seed)
    items = []
    for i, c in enumerate(classes):
        w = float(rng.integers(size // 4, size // 2))
        h = float(min(round(w * rng.uniform(1.1, 1.3)), size - 2))
        x = float(rng.integers(1, size - int(w) - 1))
        y = float(rng.integers(1, size - int(h) - 1))
        entry = ManifestEntry(f"item{i:05d}", c, [[x, y, w, h]], int(rng.integers(0, n_identities)), source=f"item{i:05d}")
        items.append(Sample(entry=entry, key=entry.path, width=size, height=size))
    return items


def task_metric(task: str, outputs: Sequence, items: Sequence[Sample], iou_thresh: float = 0.5) -> float:
    """mAP for detection, closed-set rank-1 accuracy for recognition."""
    if not items:
        raise EmptyTestSet("no items")
    if task == "detect":
        results = {s.key: out for s, out in zip(items, outputs)}
        gts = {s.key: s.entry.boxes for s in items}
        return mean_ap(results, gts, iou_thresh)
    preds = [int(np.argmax(o)) for o in outputs]
    return accuracy(preds, [s.entry.identity for s in items])


def _apply(analyzer: Callable, items, task: str, nms_iou: float):
    outs = [analyzer(s) for s in items]
    if task == "detect":
        outs = [nms(o, nms_iou) for o in outs]
    return outs


@dataclass
class SimulationConfig:
    task: str = "detect"
    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)
    items: int = 600
    items_per_cell: int = 60
    seed: int = 0
    image_size: int = 96
    n_identities: int = 10
    ks: tuple = (1, 3, 5)
    nms_iou: float = 0.5
    iou_thresh: float = 0.5
    epsilon: float = 0.05
    tolerance: float = 0.01
    profile: dict = field(default_factory=dict)
    predictor: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["taxonomy"] = self.taxonomy.to_json()
        out["ks"] = list(self.ks)
        return out


def cross_quality_matrix(config: SimulationConfig, profiles: Optional[Mapping[QualityClass, SyntheticAnalyzerProfile]] = None) -> ExperimentReport:
    """Metric of each per-class analyzer (rows) on each test class (columns)."""
    import time

    t0 = time.perf_counter()
    tax = config.taxonomy
    classes = enumerate_classes(tax)
    if profiles is None:
        profiles = {c: SyntheticAnalyzerProfile(c, tax, seed=config.seed, n_identities=config.n_identities, **config.profile)
                    for c in classes}
    missing = [c.tag for c in classes if c not in profiles]
    if missing:
        raise IncompleteInputs(f"no profile for {', '.join(missing)}")
    base = synthetic_items(config.items_per_cell, tax, config.seed, config.image_size, config.n_identities,
                           classes=[classes[0]] * config.items_per_cell)
    matrix = np.zeros((len(classes), len(classes)))
    for j, test_class in enumerate(classes):
        items = [Sample(entry=ManifestEntry(s.entry.path, test_class, s.entry.boxes, s.entry.identity, s.entry.source),
                        key=s.key, width=s.width, height=s.height) for s in base]
        for i, model_class in enumerate(classes):
            analyzer = SyntheticAnalyzer(profiles[model_class], config.task)
            outs = _apply(analyzer, items, config.task, config.nms_iou)
            matrix[i, j] = task_metric(config.task, outs, items, config.iou_thresh)
    tags = [c.tag for c in classes]
    dominance = {tags[i]: bool(np.all(matrix[i, i] >= matrix[i])) for i in range(len(classes))}
    return ExperimentReport(
        name="cross_quality_matrix",
        seed=config.seed,
        metrics={"diagonal_mean": float(np.mean(np.diag(matrix))),
                 "off_diagonal_mean": float((matrix.sum() - np.trace(matrix)) / max(1, matrix.size - len(classes)))},
        assertions={"diagonal_dominance": all(dominance.values()), **{f"row_{k}": v for k, v in dominance.items()}},
        config=config.to_json(),
        tables={"matrix": matrix.tolist(), "classes": tags},
        runtime=time.perf_counter() - t0,
    )


def mixed_quality_experiment(config: SimulationConfig, items: Optional[Sequence[Sample]] = None,
                             registry: Optional[AnalyzerRegistry] = None,
                             predictor: Optional[Callable[[Sample], FusedQualityVector]] = None,
                             mixed_analyzer: Optional[Callable] = None) -> ExperimentReport:
    """Standard / mixed-trained / oracle-routed / predicted-routing comparison."""
    import time

    t0 = time.perf_counter()
    tax = config.taxonomy
    task = config.task
    if items is None:
        items = synthetic_items(config.items, tax, config.seed, config.image_size, config.n_identities)
    if not items:
        raise IncompleteInputs("no items to evaluate")
    if any(s.entry is None for s in items):
        raise IncompleteInputs("every item needs ground truth")
    if registry is None:
        registry = synthetic_registry(task, tax, seed=config.seed, n_identities=config.n_identities, **config.profile)
    if predictor is None:
        predictor = SimulatedPredictor(tax, seed=config.seed, **config.predictor)
    if mixed_analyzer is None:
        mixed_analyzer = SyntheticAnalyzer(
            SyntheticAnalyzerProfile(None, tax, seed=config.seed, n_identities=config.n_identities, mixed=True, **config.profile),
            task,
        )

    def score(outs):
        return task_metric(task, outs, items, config.iou_thresh)

    metrics = {}
    metrics["standard"] = score(_apply(registry[enumerate_classes(tax)[0]], items, task, config.nms_iou))
    metrics["mixed_trained"] = score(_apply(mixed_analyzer, items, task, config.nms_iou))
    oracle = [registry[s.entry.quality_class](s) for s in items]
    if task == "detect":
        oracle = [nms(o, config.nms_iou) for o in oracle]
    metrics["oracle_routed"] = score(oracle)
    predicted_correct = 0
    for s in items:
        if predictor(s).argmax() == s.entry.quality_class:
            predicted_correct += 1
    metrics["predictor_accuracy"] = predicted_correct / len(items)
    for k in config.ks:
        cfg = RoutingConfig(K=k, nms_iou=config.nms_iou)
        metrics[f"routed_K{k}"] = score([analyze(registry, predictor, s, cfg) for s in items])

    tol = config.tolerance
    ks = sorted(config.ks)
    assertions = {
        "standard_lt_mixed": metrics["standard"] < metrics["mixed_trained"],
        "mixed_lt_oracle": metrics["mixed_trained"] < metrics["oracle_routed"],
    }
    if 3 in config.ks:
        assertions["routed_K3_ge_mixed"] = metrics["routed_K3"] >= metrics["mixed_trained"]
    for a, b in zip(ks, ks[1:]):
        assertions[f"routed_K{a}_le_K{b}"] = metrics[f"routed_K{a}"] <= metrics[f"routed_K{b}"] + tol
    for k in ks:
        if k >= 3:
            assertions[f"routed_K{k}_within_eps_of_oracle"] = metrics[f"routed_K{k}"] >= metrics["oracle_routed"] - config.epsilon
    return ExperimentReport(
        name="mixed_quality_experiment",
        seed=config.seed,
        metrics=metrics,
        assertions=assertions,
        config=config.to_json(),
        tables={"class_counts": {c.tag: sum(1 for s in items if s.entry.quality_class == c) for c in enumerate_classes(tax)}},
        runtime=time.perf_counter() - t0,
    )


def manifest_samples(manifest: DatasetManifest, load_pixels: bool = True) -> list[Sample]:
    out = []
    for e in manifest.entries:
        r = manifest.load(e) if load_pixels else None
        out.append(Sample(raster=r, entry=e, key=e.path))
    return out
