"""Hierarchical quality predictor: type net, two level nets, fused vector."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .degrade import QualityClass, QualityTaxonomy, enumerate_classes
from .errors import DegenerateLevel, EmptyDataset, ImageTooSmall, IoFailure, UntrainedModel
from .imageio import Raster
from .neuralnet import (
    ArchSpec,
    Network,
    TrainConfig,
    build_network,
    desk_arch,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)

TYPE_KINDS = ("G", "BJ", "BL")


@dataclass(frozen=True)
class PredictorConfig:
    patch_size: int = 32
    patches_per_image: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 8:
            raise ValueError("patch_size must be >= 8")
        if self.patches_per_image < 1:
            raise ValueError("patches_per_image must be >= 1")

    def to_json(self) -> dict:
        return {"patch_size": self.patch_size, "patches_per_image": self.patches_per_image, "seed": self.seed}


def _check_simplex(p: np.ndarray, what: str, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{what} must be a probability vector, got {p}")
    return p


@dataclass(frozen=True, eq=False)
class TypeScores:
    probs: np.ndarray

    def __post_init__(self):
        p = _check_simplex(self.probs, "type scores")
        if p.shape != (3,):
            raise ValueError("type scores have exactly three entries (G, BJ, BL)")
        object.__setattr__(self, "probs", p)

    @property
    def p_G(self) -> float:
        return float(self.probs[0])

    @property
    def p_BJ(self) -> float:
        return float(self.probs[1])

    @property
    def p_BL(self) -> float:
        return float(self.probs[2])


@dataclass(frozen=True, eq=False)
class LevelScores:
    """Index 0 is the pristine class; 1.. are severity levels."""

    family: str
    probs: np.ndarray

    def __post_init__(self):
        if self.family not in ("BJ", "BL"):
            raise ValueError(f"level family must be BJ or BL, got {self.family!r}")
        p = _check_simplex(self.probs, f"{self.family} level scores")
        if p.size < 2:
            raise ValueError("level scores need a pristine entry and at least one level")
        object.__setattr__(self, "probs", p)

    @property
    def levels(self) -> int:
        return self.probs.size - 1


@dataclass(frozen=True, eq=False)
class FusedQualityVector:
    probs: np.ndarray
    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)

    def __post_init__(self):
        p = _check_simplex(self.probs, "P_C")
        if p.size != self.taxonomy.num_classes:
            raise ValueError(f"P_C has {p.size} entries, taxonomy has {self.taxonomy.num_classes} classes")
        object.__setattr__(self, "probs", p)

    def argmax(self) -> QualityClass:
        # np.argmax returns the first maximum: ties go to the lower canonical index
        return enumerate_classes(self.taxonomy)[int(np.argmax(self.probs))]

    def __getitem__(self, c: QualityClass) -> float:
        return float(self.probs[self.taxonomy.index(c)])


def _severity(levels: LevelScores, expected: int) -> np.ndarray:
    if levels.levels != expected:
        raise ValueError(f"{levels.family} level scores have {levels.levels} levels, taxonomy has {expected}")
    sev = levels.probs[1:]
    total = sev.sum()
    if total <= 0:
        raise DegenerateLevel(f"all {levels.family} mass sits on the pristine class")
    return sev / total


def fuse_quality(t: TypeScores, lj: LevelScores, ll: LevelScores, tax: Optional[QualityTaxonomy] = None) -> FusedQualityVector:
    """Combine type and level scores into one vector over the class set.

    The level nets' pristine entry is dropped and the remaining severity mass
    renormalised, so the result has 1 + m + n entries.
    """
    if tax is None:
        tax = QualityTaxonomy()
        if (tax.m, tax.n) != (lj.levels, ll.levels):
            # only the ladder lengths matter for fusion
            tax = QualityTaxonomy(tuple(range(lj.levels, 0, -1)), tuple(range(ll.levels, 0, -1)))
    parts = []
    for scores, family_p, expected in ((lj, t.p_BJ, tax.m), (ll, t.p_BL, tax.n)):
        try:
            sev = _severity(scores, expected)
        except DegenerateLevel:
            sev = np.full(expected, 1.0 / expected)
        parts.append(family_p * sev)
    probs = np.concatenate([[t.p_G], parts[0], parts[1]])
    return FusedQualityVector(probs, tax)


# ------------------------------------------------------------- patches ----

def patch_positions(width: int, height: int, cfg: PredictorConfig, seed: Optional[int] = None) -> list[tuple[int, int]]:
    s = cfg.patch_size
    if min(width, height) < s:
        raise ImageTooSmall(f"{width}x{height} image is smaller than the {s}x{s} patch")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    xs = rng.integers(0, width - s + 1, size=cfg.patches_per_image)
    ys = rng.integers(0, height - s + 1, size=cfg.patches_per_image)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def sample_patches(r: Raster, cfg: PredictorConfig, seed: Optional[int] = None) -> list[np.ndarray]:
    """``P`` uniformly placed ``patch_size``-square crops, seeded."""
    s = cfg.patch_size
    return [r.pixels[y:y + s, x:x + s] for x, y in patch_positions(r.width, r.height, cfg, seed)]


def to_input(patches) -> np.ndarray:
    """uint8 patches -> float32 network input centred on zero."""
    x = np.asarray(patches, dtype=np.float32)
    return (x - 128.0) / 64.0


def mean_rows(rows: np.ndarray) -> np.ndarray:
    """Mean of softmax rows with an order-independent reduction."""
    rows = np.asarray(rows, dtype=np.float64)
    # sort each column so the summation order ignores patch order
    return np.sort(rows, axis=0).sum(axis=0) / rows.shape[0]


# ----------------------------------------------------------- predictor ----

TYPE_CKPT = "type.ckpt"
BJ_CKPT = "bj_level.ckpt"
BL_CKPT = "bl_level.ckpt"
PREDICTOR_JSON = "predictor.json"


@dataclass
class QualityPredictor:
    """The three networks plus the configuration they were trained under."""

    type_net: Optional[Network]
    bj_net: Optional[Network]
    bl_net: Optional[Network]
    config: PredictorConfig = field(default_factory=PredictorConfig)
    taxonomy: QualityTaxonomy = field(default_factory=QualityTaxonomy)

    def _net(self, which: str) -> Network:
        net = {"type": self.type_net, "BJ": self.bj_net, "BL": self.bl_net}[which]
        if net is None:
            raise UntrainedModel(f"no {which} network loaded")
        return net

    def _patch_probs(self, net: Network, r: Raster, cfg: PredictorConfig) -> np.ndarray:
        patches = sample_patches(r, cfg)
        x = to_input(np.stack(patches))
        if x.ndim == 3:
            x = x[..., None]
        return mean_rows(forward(net, x))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in ((TYPE_CKPT, self.type_net), (BJ_CKPT, self.bj_net), (BL_CKPT, self.bl_net)):
            if net is not None:
                save_checkpoint(net, directory / name)
        meta = {"config": self.config.to_json(), "taxonomy": self.taxonomy.to_json()}
        (directory / PREDICTOR_JSON).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "QualityPredictor":
        directory = Path(directory)
        meta_path = directory / PREDICTOR_JSON
        if not meta_path.exists():
            raise UntrainedModel(f"{meta_path} is missing")
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read {meta_path}: {exc}") from exc
        nets = []
        for name in (TYPE_CKPT, BJ_CKPT, BL_CKPT):
            p = directory / name
            nets.append(load_checkpoint(p) if p.exists() else None)
        return cls(*nets, PredictorConfig(**meta["config"]), QualityTaxonomy.from_json(meta["taxonomy"]))


def predict_type(nets: QualityPredictor, r: Raster, cfg: Optional[PredictorConfig] = None) -> TypeScores:
    cfg = cfg or nets.config
    net = nets._net("type")
    if net.arch.num_classes != 3:
        raise ValueError("type network must have three outputs")
    return TypeScores(nets._patch_probs(net, r, cfg))


def predict_level(nets: QualityPredictor, r: Raster, family: str, cfg: Optional[PredictorConfig] = None) -> LevelScores:
    cfg = cfg or nets.config
    net = nets._net(family)
    expected = 1 + (nets.taxonomy.m if family == "BJ" else nets.taxonomy.n)
    if net.arch.num_classes != expected:
        raise ValueError(f"{family} level network has {net.arch.num_classes} outputs, expected {expected}")
    return LevelScores(family, nets._patch_probs(net, r, cfg))


@dataclass
class QualityPrediction:
    quality_class: QualityClass
    fused: FusedQualityVector
    type_scores: TypeScores
    bj_levels: LevelScores
    bl_levels: LevelScores

    def to_json(self) -> dict:
        return {
            "P_C": [float(v) for v in self.fused.probs],
            "argmax": self.quality_class.to_json(),
            "type_scores": [float(v) for v in self.type_scores.probs],
            "bj_levels": [float(v) for v in self.bj_levels.probs],
            "bl_levels": [float(v) for v in self.bl_levels.probs],
        }


def predict_quality(nets: QualityPredictor, r: Raster, cfg: Optional[PredictorConfig] = None) -> QualityPrediction:
    t = predict_type(nets, r, cfg)
    lj = predict_level(nets, r, "BJ", cfg)
    ll = predict_level(nets, r, "BL", cfg)
    fused = fuse_quality(t, lj, ll, nets.taxonomy)
    return QualityPrediction(fused.argmax(), fused, t, lj, ll)


def classify_quality(nets: QualityPredictor, r: Raster, cfg: Optional[PredictorConfig] = None):
    """Argmax class of the fused vector (ties to the lower index) and the vector."""
    pred = predict_quality(nets, r, cfg)
    return pred.quality_class, pred.fused


# ------------------------------------------------------ training data ----

def type_label(c: QualityClass) -> int:
    return TYPE_KINDS.index(c.kind)


def level_label(c: QualityClass, family: str) -> Optional[int]:
    """Level-net target: 0 for G, the level for ``family``, None otherwise."""
    if c.kind == "G":
        return 0
    if c.kind == family:
        return c.level
    return None


def level_distance(a: QualityClass, b: QualityClass) -> float:
    """Severity distance treating G as level 0 of either family."""
    if a.kind == "G" and b.kind == "G":
        return 0
    if a.kind == "G" or b.kind == "G":
        return (b if a.kind == "G" else a).level
    if a.kind != b.kind:
        return float("inf")
    return abs(a.level - b.level)


def patch_dataset(images: Sequence[Raster], labels: Sequence[int], cfg: PredictorConfig, seed: int = 0):
    """Crop ``cfg.patches_per_image`` patches from every image.

    Patch positions for image ``i`` come from ``default_rng([seed, i])``.
    """
    xs, ys = [], []
    for i, (r, y) in enumerate(zip(images, labels)):
        pos_seed = np.random.default_rng([seed, i]).integers(0, 2**31)
        for p in sample_patches(r, cfg, seed=int(pos_seed)):
            xs.append(p)
            ys.append(y)
    return to_input(np.stack(xs)), np.asarray(ys, dtype=np.int64)


NET_KINDS = {"type": TYPE_CKPT, "bj-level": BJ_CKPT, "bl-level": BL_CKPT}


def net_labels(classes: Sequence[QualityClass], net_kind: str) -> list[Optional[int]]:
    """Targets for one of the three networks; None marks unusable samples."""
    if net_kind == "type":
        return [type_label(c) for c in classes]
    if net_kind not in NET_KINDS:
        raise ValueError(f"net must be one of {', '.join(NET_KINDS)}, got {net_kind!r}")
    family = "BJ" if net_kind == "bj-level" else "BL"
    return [level_label(c, family) for c in classes]


def net_num_classes(net_kind: str, tax: QualityTaxonomy) -> int:
    return {"type": 3, "bj-level": 1 + tax.m, "bl-level": 1 + tax.n}[net_kind]


def train_quality_net(images: Sequence[Raster], classes: Sequence[QualityClass], net_kind: str,
                      tax: QualityTaxonomy, pcfg: PredictorConfig, tcfg: TrainConfig,
                      init: Optional[Network] = None, arch: Optional[ArchSpec] = None, log=None):
    """Train (or continue training ``init``) one network of the predictor.

    Level nets only see G plus their own family. Returns ``(net, history)``.
    """
    labels = net_labels(classes, net_kind)
    keep = [i for i, y in enumerate(labels) if y is not None]
    if not keep:
        raise EmptyDataset(f"no samples usable for the {net_kind} network")
    imgs = [images[i] for i in keep]
    x, y = patch_dataset(imgs, [labels[i] for i in keep], pcfg, seed=tcfg.seed)
    if x.ndim == 3:
        x = x[..., None]
    if init is None:
        arch = arch or desk_arch(net_num_classes(net_kind, tax), pcfg.patch_size, imgs[0].channels)
        init = build_network(arch, tcfg.seed)
    return train(init, (x, y), tcfg, log=log)
