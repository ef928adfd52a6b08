"""Top-K model selection by fused quality and fusion of analyzer outputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .degrade import QualityClass, QualityTaxonomy, enumerate_classes
from .errors import BadWeights, DimensionMismatch, InvalidK, MissingAnalyzer
from .imageio import Raster


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4 or box[2] <= 0 or box[3] <= 0:
            raise ValueError(f"box must be (x, y, w, h) with w, h > 0, got {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "score", float(self.score))

    def clamped(self, width: int, height: int) -> "Detection":
        x, y, w, h = self.box
        x0, y0 = min(max(x, 0.0), width - 1.0), min(max(y, 0.0), height - 1.0)
        x1, y1 = min(max(x + w, x0 + 1.0), float(width)), min(max(y + h, y0 + 1.0), float(height))
        return Detection((x0, y0, x1 - x0, y1 - y0), self.score)

    def to_json(self) -> dict:
        return {"box": list(self.box), "score": self.score}


@dataclass(frozen=True)
class RoutingConfig:
    K: int = 3
    nms_iou: float = 0.5
    weighted_scores: bool = False

    def __post_init__(self):
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")

    def validate(self, tax: QualityTaxonomy) -> "RoutingConfig":
        if not 1 <= self.K <= tax.num_classes:
            raise InvalidK(f"K must lie in 1..{tax.num_classes}, got {self.K}")
        return self


@dataclass
class Sample:
    """What an analyzer sees: the pixels and, when known, the labelled entry."""

    raster: Optional[Raster] = None
    entry: Any = None
    key: str = ""
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.raster is not None:
            self.width, self.height = self.raster.width, self.raster.height


Analyzer = Callable[[Sample], Any]


@dataclass
class AnalyzerRegistry:
    """One analyzer per quality class of ``taxonomy``."""

    task: str
    entries: Mapping[QualityClass, Analyzer]
    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)

    def __post_init__(self):
        if self.task not in ("detect", "recognize"):
            raise ValueError(f"task must be detect or recognize, got {self.task!r}")
        missing = [c.tag for c in enumerate_classes(self.taxonomy) if c not in self.entries]
        if missing:
            raise MissingAnalyzer(f"registry lacks analyzers for {', '.join(missing)}")

    def __getitem__(self, c: QualityClass) -> Analyzer:
        try:
            return self.entries[c]
        except KeyError:
            raise MissingAnalyzer(f"no analyzer for {c.tag}") from None


def select_top_k(p, K: int) -> list[tuple[QualityClass, float]]:
    """Highest-probability classes with weights renormalised to sum to 1.

    Ties go to the lower canonical index; zero-probability classes are
    dropped even when that leaves fewer than ``K``.
    """
    probs = np.asarray(p.probs, dtype=np.float64)
    if not 1 <= K <= probs.size:
        raise InvalidK(f"K must lie in 1..{probs.size}, got {K}")
    order = np.argsort(-probs, kind="stable")[:K]
    order = [int(i) for i in order if probs[i] > 0]
    total = float(sum(probs[i] for i in order))
    classes = enumerate_classes(p.taxonomy)
    return [(classes[i], float(probs[i] / total)) for i in order]


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy NMS; equal scores keep their input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    alive = [True] * len(dets)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(dets[i])
        for j in order[pos + 1:]:
            if alive[j] and iou(dets[i].box, dets[j].box) > iou_thresh:
                alive[j] = False
    return kept


def fuse_detections(per_model: Sequence[tuple[float, Sequence[Detection]]], cfg: RoutingConfig) -> list[Detection]:
    """Union of every model's boxes followed by NMS.

    Scores are kept raw unless ``cfg.weighted_scores`` is set. The union is
    sorted by box and score first so the result ignores model order.
    """
    pool = []
    for weight, dets in per_model:
        for d in dets:
            pool.append(Detection(d.box, d.score * weight) if cfg.weighted_scores else d)
    pool.sort(key=lambda d: (-d.score, d.box))
    return nms(pool, cfg.nms_iou)


def fuse_recognition(per_model: Sequence[tuple[float, Any]]) -> np.ndarray:
    """Convex combination of identity score vectors."""
    if not per_model:
        raise BadWeights("no models to fuse")
    weights = np.array([w for w, _ in per_model], dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
        raise BadWeights(f"weights must be nonnegative and sum to 1, got {weights}")
    vecs = [np.asarray(v, dtype=np.float64) for _, v in per_model]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise DimensionMismatch("identity score vectors differ in length")
    out = np.zeros_like(vecs[0])
    for w, v in zip(weights, vecs):
        out += w * v
    return out


def analyze(reg: AnalyzerRegistry, predictor: Callable[[Sample], Any], sample: Sample, cfg: RoutingConfig):
    """Predict quality, run the top-K analyzers and fuse their outputs.

    Selected analyzers run in canonical class order.
    """
    cfg.validate(reg.taxonomy)
    fused = predictor(sample)
    chosen = select_top_k(fused, cfg.K)
    chosen.sort(key=lambda cw: reg.taxonomy.index(cw[0]))
    outputs = [(w, reg[c](sample)) for c, w in chosen]
    if reg.task == "detect":
        return fuse_detections(outputs, cfg)
    return fuse_recognition(outputs)
