"""Quality taxonomy, degradation ladders and labelled dataset builders."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidClass, IoFailure
from .imageio import Raster, format_for_raster, load_image, resize, save_image
from .jpeg import jpeg_decode, jpeg_encode

DEFAULT_JPEG_FACTORS = (27, 24, 21, 18, 15, 12, 9, 6, 3, 0)
DEFAULT_DOWNSAMPLE_SIZES = (80, 72, 64, 56, 48, 40, 32, 24, 16, 8)

KINDS = ("G", "BJ", "BL")


@dataclass(frozen=True, order=False)
class QualityClass:
    kind: str
    level: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidClass(f"unknown quality kind {self.kind!r}")
        if self.kind == "G" and self.level is not None:
            raise InvalidClass("class G carries no level")
        if self.kind != "G" and (not isinstance(self.level, (int, np.integer)) or self.level < 1):
            raise InvalidClass(f"{self.kind} needs a level >= 1, got {self.level!r}")

    @property
    def tag(self) -> str:
        return "G" if self.kind == "G" else f"{self.kind}{self.level}"

    def __str__(self):
        return self.tag

    @classmethod
    def parse(cls, text: str) -> "QualityClass":
        """Accepts ``G``, ``BJ:3``, ``BJ3``, ``bl:10``."""
        t = text.strip().upper().replace(":", "").replace("_", "")
        if t == "G":
            return cls("G")
        for kind in ("BJ", "BL"):
            if t.startswith(kind) and t[len(kind):].isdigit():
                return cls(kind, int(t[len(kind):]))
        raise InvalidClass(f"cannot parse quality class {text!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind} if self.kind == "G" else {"kind": self.kind, "level": int(self.level)}

    @classmethod
    def from_json(cls, obj: dict) -> "QualityClass":
        return cls(obj["kind"], obj.get("level"))


G = QualityClass("G")


def BJ(level: int) -> QualityClass:
    return QualityClass("BJ", level)


def BL(level: int) -> QualityClass:
    return QualityClass("BL", level)


@dataclass(frozen=True)
class QualityTaxonomy:
    """The class set G, BJ_1..BJ_m, BL_1..BL_n with its degradation ladders."""

    jpeg_factors: tuple = DEFAULT_JPEG_FACTORS
    downsample_sizes: tuple = DEFAULT_DOWNSAMPLE_SIZES

    def __post_init__(self):
        jf = tuple(int(x) for x in self.jpeg_factors)
        ds = tuple(int(x) for x in self.downsample_sizes)
        if any(a <= b for a, b in zip(jf, jf[1:])):
            raise ValueError(f"jpeg_factors must be strictly decreasing: {jf}")
        if any(a <= b for a, b in zip(ds, ds[1:])):
            raise ValueError(f"downsample_sizes must be strictly decreasing: {ds}")
        if any(not 0 <= q <= 100 for q in jf):
            raise ValueError("jpeg factors must lie in 0..100")
        if any(s < 1 for s in ds):
            raise ValueError("downsample sizes must be >= 1")
        object.__setattr__(self, "jpeg_factors", jf)
        object.__setattr__(self, "downsample_sizes", ds)

    @property
    def m(self) -> int:
        return len(self.jpeg_factors)

    @property
    def n(self) -> int:
        return len(self.downsample_sizes)

    @property
    def num_classes(self) -> int:
        return 1 + self.m + self.n

    def validate(self, c: QualityClass) -> QualityClass:
        limit = {"G": None, "BJ": self.m, "BL": self.n}[c.kind]
        if limit is not None and not 1 <= c.level <= limit:
            raise InvalidClass(f"{c.tag} is outside the taxonomy (1..{limit})")
        return c

    def index(self, c: QualityClass) -> int:
        """Position of ``c`` in the canonical class order."""
        self.validate(c)
        if c.kind == "G":
            return 0
        if c.kind == "BJ":
            return c.level
        return self.m + c.level

    def to_json(self) -> dict:
        return {"jpeg_factors": list(self.jpeg_factors), "downsample_sizes": list(self.downsample_sizes)}

    @classmethod
    def from_json(cls, obj: dict) -> "QualityTaxonomy":
        return cls(tuple(obj["jpeg_factors"]), tuple(obj["downsample_sizes"]))


def enumerate_classes(tax: QualityTaxonomy) -> list[QualityClass]:
    """Canonical order ``[G, BJ_1..BJ_m, BL_1..BL_n]``."""
    return [G] + [BJ(i) for i in range(1, tax.m + 1)] + [BL(j) for j in range(1, tax.n + 1)]


def jpeg_quality_for_factor(factor: int) -> int:
    # IJG treats quality 0 as 1
    return max(1, int(factor))


def degrade(r: Raster, c: QualityClass, tax: QualityTaxonomy) -> Raster:
    """Apply the degradation named by ``c``; dimensions are always preserved."""
    tax.validate(c)
    if c.kind == "G":
        return Raster(r.pixels.copy())
    if c.kind == "BJ":
        q = jpeg_quality_for_factor(tax.jpeg_factors[c.level - 1])
        return jpeg_decode(jpeg_encode(r, q))
    size = tax.downsample_sizes[c.level - 1]
    small = resize(r, size, size)
    return resize(small, r.width, r.height)


# ------------------------------------------------------------ datasets ----

@dataclass
class LabeledImage:
    """A corpus image with quality-invariant task labels."""

    name: str
    raster: Raster
    boxes: Optional[list] = None
    identity: Optional[int] = None


@dataclass
class ManifestEntry:
    path: str
    quality_class: QualityClass
    boxes: Optional[list] = None
    identity: Optional[int] = None
    source: Optional[str] = None

    def to_json(self) -> dict:
        out = {"path": self.path, "class": self.quality_class.to_json()}
        if self.boxes is not None:
            out["boxes"] = [list(map(float, b)) for b in self.boxes]
        if self.identity is not None:
            out["identity"] = int(self.identity)
        if self.source is not None:
            out["source"] = self.source
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        return cls(
            path=obj["path"],
            quality_class=QualityClass.from_json(obj["class"]),
            boxes=[list(b) for b in obj["boxes"]] if obj.get("boxes") is not None else None,
            identity=obj.get("identity"),
            source=obj.get("source"),
        )


@dataclass
class DatasetManifest:
    """Labelled image list. Relative paths resolve against ``root``."""

    entries: list
    seed: int
    taxonomy: QualityTaxonomy
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            self.taxonomy.validate(e.quality_class)
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def load(self, entry: ManifestEntry) -> Raster:
        return load_image(self.resolve(entry))

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "taxonomy": self.taxonomy.to_json(),
            "entries": [e.to_json() for e in self.entries],
        }

    def save(self, path) -> None:
        path = Path(path)
        text = json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"
        try:
            path.write_text(text)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def from_json(cls, obj: dict, root=None) -> "DatasetManifest":
        return cls(
            entries=[ManifestEntry.from_json(e) for e in obj["entries"]],
            seed=int(obj["seed"]),
            taxonomy=QualityTaxonomy.from_json(obj["taxonomy"]),
            root=Path(root) if root is not None else None,
        )

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return cls.from_json(obj, root=path.parent)


def _image_name(item: LabeledImage, r: Raster) -> str:
    stem = Path(item.name).stem
    return stem + (".pgm" if r.channels == 1 else ".ppm")


def _materialize(item: LabeledImage, c: QualityClass, tax: QualityTaxonomy, out_dir: Optional[Path], rel: str) -> ManifestEntry:
    if out_dir is not None:
        img = degrade(item.raster, c, tax)
        dest = out_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, dest, format_for_raster(img))
    return ManifestEntry(rel, c, item.boxes, item.identity, source=item.name)


def _ordered_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def build_per_class_datasets(corpus: Sequence[LabeledImage], tax: QualityTaxonomy, out_dir, seed: int = 0,
                             threads: int = 1, classes: Optional[Sequence[QualityClass]] = None) -> list[DatasetManifest]:
    """Degrade every corpus image to every class; one manifest per class.

    Images go to ``out_dir/<class tag>/`` and each manifest is written as
    ``out_dir/<class tag>.json`` with paths relative to ``out_dir``.
    ``classes`` restricts the build to a subset.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for c in (enumerate_classes(tax) if classes is None else [tax.validate(c) for c in classes]):
        jobs = [(item, f"{c.tag}/{_image_name(item, item.raster)}") for item in corpus]
        entries = _ordered_map(lambda j: _materialize(j[0], c, tax, out_dir, j[1]), jobs, threads)
        m = DatasetManifest(entries, seed, tax, root=out_dir)
        m.save(out_dir / f"{c.tag}.json")
        manifests.append(m)
    return manifests


def assign_mixed_classes(n_items: int, tax: QualityTaxonomy, seed: int) -> list[QualityClass]:
    classes = enumerate_classes(tax)
    draws = np.random.default_rng(seed).integers(0, len(classes), size=n_items)
    return [classes[k] for k in draws]


def build_mixed_dataset(corpus: Sequence[LabeledImage], tax: QualityTaxonomy, seed: int, out_dir=None, threads: int = 1) -> DatasetManifest:
    """Assign each image one class drawn uniformly with a seeded generator.

    With ``out_dir`` the degraded images are written under ``out_dir/mixed/``;
    without it only the assignment is recorded.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    classes = assign_mixed_classes(len(corpus), tax, seed)
    jobs = [(item, c, f"mixed/{c.tag}/{_image_name(item, item.raster)}") for item, c in zip(corpus, classes)]
    entries = _ordered_map(lambda j: _materialize(j[0], j[1], tax, out, j[2]), jobs, threads)
    return DatasetManifest(entries, seed, tax, root=out)


# -------------------------------------------------------------- corpus ----

LABELS_FILE = "labels.json"
_IMAGE_SUFFIXES = {".pgm", ".ppm", ".jpg", ".jpeg"}


def load_corpus(directory) -> list[LabeledImage]:
    """Read every PGM/PPM/JPEG in ``directory`` (sorted by name).

    Optional ``labels.json`` maps file names to ``{"boxes": ..., "identity": ...}``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"corpus directory {directory} does not exist")
    labels = {}
    if (directory / LABELS_FILE).exists():
        labels = json.loads((directory / LABELS_FILE).read_text())
    items = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in _IMAGE_SUFFIXES:
            lab = labels.get(p.name, {})
            items.append(LabeledImage(p.name, load_image(p), lab.get("boxes"), lab.get("identity")))
    if not items:
        raise IoFailure(f"no images found in {directory}")
    return items


def save_corpus(corpus: Sequence[LabeledImage], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = {}
    for item in corpus:
        name = _image_name(item, item.raster)
        save_image(item.raster, directory / name, format_for_raster(item.raster))
        lab = {}
        if item.boxes is not None:
            lab["boxes"] = [list(map(float, b)) for b in item.boxes]
        if item.identity is not None:
            lab["identity"] = int(item.identity)
        labels[name] = lab
    tmp = directory / (LABELS_FILE + ".tmp")
    tmp.write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, directory / LABELS_FILE)
