"""Run configuration: one strict JSON document per run.

Unknown keys are rejected and every validation problem is reported at once.
Relative paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .degrade import DEFAULT_DOWNSAMPLE_SIZES, DEFAULT_JPEG_FACTORS, QualityTaxonomy
from .errors import IoFailure, ValidationErrors
from .evaluation import SimulationConfig
from .neuralnet import TrainConfig
from .qualitynet import PredictorConfig
from .routing import RoutingConfig

WORKDIR_ENV = "QCIA_WORKDIR"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _strictly_decreasing(v: list, what: str) -> list:
    if any(a <= b for a, b in zip(v, v[1:])):
        raise ValueError(f"{what} must be strictly decreasing")
    return v


class TaxonomySection(_Strict):
    jpeg_factors: list[int] = Field(default_factory=lambda: list(DEFAULT_JPEG_FACTORS))
    downsample_sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_DOWNSAMPLE_SIZES))

    @field_validator("jpeg_factors")
    @classmethod
    def _jf(cls, v):
        if any(not 0 <= q <= 100 for q in v):
            raise ValueError("jpeg factors must lie in 0..100")
        return _strictly_decreasing(v, "jpeg_factors")

    @field_validator("downsample_sizes")
    @classmethod
    def _ds(cls, v):
        if any(s < 1 for s in v):
            raise ValueError("downsample sizes must be >= 1")
        return _strictly_decreasing(v, "downsample_sizes")

    def build(self) -> QualityTaxonomy:
        return QualityTaxonomy(tuple(self.jpeg_factors), tuple(self.downsample_sizes))


class PredictorSection(_Strict):
    patch_size: int = Field(32, ge=8)
    patches_per_image: int = Field(8, ge=1)
    seed: int = 0

    def build(self) -> PredictorConfig:
        return PredictorConfig(self.patch_size, self.patches_per_image, self.seed)


class TrainSection(_Strict):
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)
    seed: int = 0
    weight_decay: float = Field(1e-4, ge=0)

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class RoutingSection(_Strict):
    K: int = Field(3, ge=1)
    nms_iou: float = Field(0.5, gt=0, lt=1)
    weighted_scores: bool = False

    def build(self) -> RoutingConfig:
        return RoutingConfig(**self.model_dump())


class PathsSection(_Strict):
    corpus_dir: Optional[str] = None
    work_dir: str = "."


class SimulationSection(_Strict):
    task: Literal["detect", "recognize"] = "detect"
    experiments: list[Literal["cross_quality_matrix", "mixed_quality_experiment"]] = Field(
        default_factory=lambda: ["cross_quality_matrix", "mixed_quality_experiment"])
    items: int = Field(600, ge=1)
    items_per_cell: int = Field(60, ge=1)
    image_size: int = Field(96, ge=8)
    n_identities: int = Field(10, ge=2)
    ks: list[int] = Field(default_factory=lambda: [1, 3, 5])
    iou_thresh: float = Field(0.5, gt=0, lt=1)
    epsilon: float = Field(0.05, ge=0)
    tolerance: float = Field(0.01, ge=0)
    profile: dict = Field(default_factory=dict)
    predictor: dict = Field(default_factory=dict)

    @field_validator("ks")
    @classmethod
    def _ks(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("ks must be a nonempty list of positive integers")
        return v


class RunConfig(_Strict):
    seed: int = 0
    taxonomy: TaxonomySection = Field(default_factory=TaxonomySection)
    predictor: PredictorSection = Field(default_factory=PredictorSection)
    train: TrainSection = Field(default_factory=TrainSection)
    routing: RoutingSection = Field(default_factory=RoutingSection)
    paths: PathsSection = Field(default_factory=PathsSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)

    @model_validator(mode="after")
    def _cross_checks(self):
        total = 1 + len(self.taxonomy.jpeg_factors) + len(self.taxonomy.downsample_sizes)
        problems = []
        if self.routing.K > total:
            problems.append(f"routing.K: must lie in 1..{total}")
        bad = [k for k in self.simulation.ks if k > total]
        if bad:
            problems.append(f"simulation.ks: {bad} exceed the {total} quality classes")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    # ------------------------------------------------------------------
    def tax(self) -> QualityTaxonomy:
        return self.taxonomy.build()

    def simulation_config(self, task: Optional[str] = None) -> SimulationConfig:
        s = self.simulation
        return SimulationConfig(
            task=task or s.task,
            taxonomy=self.tax(),
            items=s.items,
            items_per_cell=s.items_per_cell,
            seed=self.seed,
            image_size=s.image_size,
            n_identities=s.n_identities,
            ks=tuple(s.ks),
            nms_iou=self.routing.nms_iou,
            iou_thresh=s.iou_thresh,
            epsilon=s.epsilon,
            tolerance=s.tolerance,
            profile=dict(s.profile),
            predictor=dict(s.predictor),
        )

    def to_json(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        out.append(f"{loc}: {msg}")
    return out


def validate_config(obj, base_dir=None) -> RunConfig:
    """Validate a decoded JSON object; paths are made absolute and checked."""
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ValidationErrors(_format_errors(exc)) from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    work = os.environ.get(WORKDIR_ENV) or cfg.paths.work_dir
    paths = {"work_dir": str((base / work).resolve())}
    if cfg.paths.corpus_dir is not None:
        paths["corpus_dir"] = str((base / cfg.paths.corpus_dir).resolve())
    errors = [f"paths.{k}: directory {v} does not exist" for k, v in paths.items() if not Path(v).is_dir()]
    if errors:
        raise ValidationErrors(errors)
    return cfg.model_copy(update={"paths": PathsSection(corpus_dir=paths.get("corpus_dir"), work_dir=paths["work_dir"])})


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationErrors([f"<root>: invalid JSON ({exc})"]) from None
    return validate_config(obj, path.parent)
