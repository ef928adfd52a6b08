"""``qcia`` command line: degrade, train, predict, evaluate, simulate, gradcheck.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
Errors go to stderr prefixed with ``qcia-error:``. Every output path is
resolved inside the work dir (``--config`` paths.work_dir, else
``$QCIA_WORKDIR``, else the current directory).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .config import RunConfig, parse_config, validate_config
from .corpus import desk_corpus
from .degrade import (
    DatasetManifest,
    ManifestEntry,
    QualityClass,
    QualityTaxonomy,
    build_mixed_dataset,
    build_per_class_datasets,
    enumerate_classes,
    load_corpus,
    save_corpus,
)
from .errors import IncompleteInputs, QciaError, UnsupportedFormat
from .evaluation import (
    ExperimentReport,
    SimulatedPredictor,
    SyntheticAnalyzer,
    SyntheticAnalyzerProfile,
    confusion,
    cross_quality_matrix,
    manifest_samples,
    matrix_csv,
    mixed_quality_experiment,
)
from .imageio import load_image, resize, to_gray
from .neuralnet import Network, forward, gradcheck_suite, load_checkpoint, save_checkpoint
from .qualitynet import (
    NET_KINDS,
    PREDICTOR_JSON,
    QualityPredictor,
    predict_quality,
    to_input,
    train_quality_net,
)
from .routing import AnalyzerRegistry, Sample

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


# ------------------------------------------------------------- helpers ----

def _load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return validate_config({})
    return parse_config(path)


def _workdir(cfg: RunConfig) -> Path:
    # validate_config already applied QCIA_WORKDIR
    return Path(cfg.paths.work_dir)


def _out_path(path: str, workdir: Path) -> Path:
    """Resolve an output path inside ``workdir``; refuse anything outside."""
    p = Path(path)
    full = (p if p.is_absolute() else workdir / p).resolve()
    root = workdir.resolve()
    if full != root and root not in full.parents:
        raise QciaError(f"output {full} lies outside the work dir {root}")
    return full


def _seeded(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    """--seed replaces the run seed and every sub-config seed."""
    if seed is None:
        return cfg
    return cfg.model_copy(update={
        "seed": seed,
        "train": cfg.train.model_copy(update={"seed": seed}),
        "predictor": cfg.predictor.model_copy(update={"seed": seed}),
    })


def _rebase(manifest: DatasetManifest, dest: Path) -> DatasetManifest:
    """Rewrite entry paths relative to the directory that will hold ``dest``."""
    base = dest.parent
    entries = []
    for e in manifest.entries:
        rel = os.path.relpath(manifest.resolve(e).resolve(), base) if manifest.root is not None else e.path
        entries.append(ManifestEntry(rel, e.quality_class, e.boxes, e.identity, e.source))
    return DatasetManifest(entries, manifest.seed, manifest.taxonomy, root=base)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ------------------------------------------------------------ registry ----

class CheckpointRecognizer:
    """Identity classifier over the whole image resized to the net input."""

    def __init__(self, net: Network):
        self.net = net

    def __call__(self, sample: Sample):
        r = sample.raster
        if r is None:
            raise IncompleteInputs("checkpoint recognizers need image pixels")
        h, w, c = self.net.arch.input
        if c == 1 and r.channels != 1:
            r = to_gray(r)
        r = resize(r, w, h)
        return forward(self.net, to_input(r.pixels[None]))[0]


def load_registry(path, tax: QualityTaxonomy, seed: int = 0, task: Optional[str] = None):
    """Registry JSON -> (AnalyzerRegistry, mixed analyzer or None).

    Each model is ``{"class": {...}, "checkpoint": path | {"synthetic_profile": {...}}}``.
    An optional top-level ``"mixed"`` entry supplies the mixed-trained model.
    """
    path = Path(path)
    obj = json.loads(path.read_text())
    task = task or obj["task"]
    if obj.get("task", task) != task:
        raise IncompleteInputs(f"registry is for task {obj['task']!r}, not {task!r}")

    def build(spec, model_class):
        ck = spec["checkpoint"]
        if isinstance(ck, dict):
            prof = SyntheticAnalyzerProfile.from_json({"seed": seed, **ck["synthetic_profile"]}, tax, model_class)
            return SyntheticAnalyzer(prof, task)
        if task == "detect":
            raise UnsupportedFormat("checkpoint detectors are not supported; use synthetic profiles")
        ck_path = Path(ck) if Path(ck).is_absolute() else path.parent / ck
        return CheckpointRecognizer(load_checkpoint(ck_path))

    entries = {}
    for spec in obj["models"]:
        c = tax.validate(QualityClass.from_json(spec["class"]))
        entries[c] = build(spec, c)
    reg = AnalyzerRegistry(task, entries, tax)
    mixed = None
    if "mixed" in obj:
        spec = obj["mixed"]
        ck = spec["checkpoint"]
        if isinstance(ck, dict):
            prof = SyntheticAnalyzerProfile.from_json({"seed": seed, **ck["synthetic_profile"], "mixed": True}, tax)
            mixed = SyntheticAnalyzer(prof, task)
        else:
            mixed = build(spec, None)
    elif all(isinstance(s["checkpoint"], dict) for s in obj["models"]):
        base = {k: v for k, v in obj["models"][0]["checkpoint"]["synthetic_profile"].items() if k != "model_class"}
        mixed = SyntheticAnalyzer(SyntheticAnalyzerProfile.from_json({"seed": seed, **base, "mixed": True}, tax), task)
    return reg, mixed


def synthetic_registry_json(task: str, tax: QualityTaxonomy, profile: Optional[dict] = None) -> dict:
    prof = dict(profile or {})
    return {
        "task": task,
        "models": [{"class": c.to_json(), "checkpoint": {"synthetic_profile": prof}} for c in enumerate_classes(tax)],
    }


# --------------------------------------------------------- subcommands ----

def cmd_corpus(args, cfg: RunConfig) -> int:
    out = _out_path(args.out, _workdir(cfg))
    save_corpus(desk_corpus(args.n, cfg.seed, args.size, cfg.simulation.n_identities), out)
    print(f"wrote {args.n} images to {out}")
    return 0


def cmd_degrade(args, cfg: RunConfig) -> int:
    work = _workdir(cfg)
    tax = cfg.tax()
    corpus = load_corpus(args.in_dir)
    out = _out_path(args.out, work)
    manifest_path = _out_path(args.manifest, work) if args.manifest else None
    if args.mixed:
        m = build_mixed_dataset(corpus, tax, cfg.seed, out, threads=args.threads)
    elif args.quality_class:
        c = tax.validate(QualityClass.parse(args.quality_class))
        manifests = build_per_class_datasets(corpus, tax, out, cfg.seed, args.threads, classes=[c])
        m = manifests[0]
    else:
        manifests = build_per_class_datasets(corpus, tax, out, cfg.seed, args.threads)
        entries = [e for mm in manifests for e in mm.entries]
        m = DatasetManifest(entries, cfg.seed, tax, root=out)
    if manifest_path is None:
        manifest_path = out / "manifest.json"
    _rebase(m, manifest_path).save(manifest_path)
    print(f"{len(m)} entries -> {manifest_path}")
    return 0


def cmd_train_quality(args, cfg: RunConfig) -> int:
    work = _workdir(cfg)
    manifest = DatasetManifest.read(args.manifest)
    tax = manifest.taxonomy
    if tax != cfg.tax():
        raise IncompleteInputs("manifest taxonomy differs from the config taxonomy")
    out = _out_path(args.out, work)
    bundle_dir = None
    if out.is_dir() or args.out.endswith(("/", os.sep)):
        bundle_dir = out
        out = out / NET_KINDS[args.net]
    out.parent.mkdir(parents=True, exist_ok=True)
    init = load_checkpoint(args.resume) if args.resume else None
    images = [manifest.load(e) for e in manifest.entries]
    classes = [e.quality_class for e in manifest.entries]
    pcfg = cfg.predictor.build()
    t0 = time.perf_counter()
    net, history = train_quality_net(images, classes, args.net, tax, pcfg, cfg.train.build(), init=init)
    save_checkpoint(net, out)
    if bundle_dir is not None:
        meta = {"config": pcfg.to_json(), "taxonomy": tax.to_json()}
        _write_text(bundle_dir / PREDICTOR_JSON, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    rows = ["epoch,loss,accuracy"] + [f"{h.epoch},{h.loss!r},{h.accuracy!r}" for h in history]
    _write_text(_sibling(out, ".history.csv"), "\n".join(rows) + "\n")
    if history:
        from .plotting import plot_history

        plot_history(history, _sibling(out, ".history.png"), title=f"{args.net} network")
    for h in history:
        print(f"epoch {h.epoch} loss={h.loss:.4f} accuracy={h.accuracy:.4f}")
    print(f"checkpoint -> {out}")
    print(f"runtime {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def cmd_predict_quality(args, cfg: RunConfig) -> int:
    bundle = QualityPredictor.load(args.bundle)
    pcfg = bundle.config
    if args.patches is not None:
        pcfg = type(pcfg)(pcfg.patch_size, args.patches, pcfg.seed)
    pred = predict_quality(bundle, load_image(args.image), pcfg)
    if args.json:
        print(json.dumps(pred.to_json(), sort_keys=True))
    else:
        print(f"class={pred.quality_class.tag} p={pred.fused[pred.quality_class]:.4f}")
    return 0


def _bundle_predictor(bundle: QualityPredictor):
    def predict(sample: Sample):
        if sample.raster is None:
            raise IncompleteInputs("the trained predictor needs image pixels")
        return predict_quality(bundle, sample.raster).fused
    return predict


def _emit_report(report: ExperimentReport, path: Path, extra_csv: Optional[dict] = None) -> None:
    from .plotting import plot_report

    _write_text(path, report.dumps())
    _write_text(_sibling(path, ".csv"), report.metrics_csv())
    for suffix, text in (extra_csv or {}).items():
        _write_text(_sibling(path, suffix), text)
    plot_report(report, path.parent, path.stem)


def cmd_eval(args, cfg: RunConfig) -> int:
    work = _workdir(cfg)
    report_path = _out_path(args.report, work)
    manifest = DatasetManifest.read(args.manifest)
    tax = manifest.taxonomy
    reg, mixed = load_registry(args.registry, tax, cfg.seed, args.task)
    if mixed is None:
        raise IncompleteInputs("registry has no mixed-trained model")
    samples = manifest_samples(manifest, load_pixels=args.bundle is not None or _needs_pixels(reg, mixed))
    if args.bundle:
        bundle = QualityPredictor.load(args.bundle)
        predictor = _bundle_predictor(bundle)
    else:
        predictor = SimulatedPredictor(tax, seed=cfg.seed, **cfg.simulation.predictor)
    sim = cfg.simulation_config(args.task)
    sim.taxonomy = tax
    sim.ks = (args.k,)
    t0 = time.perf_counter()
    report = mixed_quality_experiment(sim, samples, reg, predictor, mixed)
    classes = enumerate_classes(tax)
    preds = [tax.index(predictor(s).argmax()) for s in samples]
    truth = [tax.index(s.entry.quality_class) for s in samples]
    cm = confusion(preds, truth, len(classes), [c.tag for c in classes])
    report.tables["confusion"] = cm.counts.tolist()
    report.tables["confusion_labels"] = cm.labels
    report.config["predictor"] = "bundle" if args.bundle else "simulated"
    _emit_report(report, report_path, {"_confusion.csv": cm.to_csv()})
    _print_report(report)
    print(f"runtime {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def _needs_pixels(reg: AnalyzerRegistry, mixed) -> bool:
    return any(isinstance(a, CheckpointRecognizer) for a in list(reg.entries.values()) + [mixed])


def _print_report(report: ExperimentReport) -> None:
    for k in sorted(report.metrics):
        print(f"{report.name} {k} {report.metrics[k]:.4f}")
    for k in sorted(report.assertions):
        print(f"{report.name} assert {k} {'pass' if report.assertions[k] else 'FAIL'}")


def cmd_simulate(args, cfg: RunConfig) -> int:
    work = _workdir(cfg)
    report_path = _out_path(args.report, work)
    tasks = [args.task] if args.task else [cfg.simulation.task]
    t0 = time.perf_counter()
    combined = {"run_config": cfg.to_json(), "experiments": {}}
    csv_rows = ["task,experiment,setting,metric"]
    passed = True
    for task in tasks:
        sim = cfg.simulation_config(task)
        for name in cfg.simulation.experiments:
            rep = cross_quality_matrix(sim) if name == "cross_quality_matrix" else mixed_quality_experiment(sim)
            combined["experiments"][f"{task}/{name}"] = rep.to_json()
            csv_rows += [f"{task},{name},{k},{rep.metrics[k]!r}" for k in sorted(rep.metrics)]
            stem = f"{report_path.stem}_{task}_{name}"
            if "matrix" in rep.tables:
                tags = rep.tables["classes"]
                _write_text(report_path.parent / f"{stem}.csv", matrix_csv(rep.tables["matrix"], tags, tags))
            from .plotting import plot_report

            report_path.parent.mkdir(parents=True, exist_ok=True)
            plot_report(rep, report_path.parent, stem)
            _print_report(rep)
            passed &= rep.passed()
    combined["passed"] = passed
    _write_text(report_path, json.dumps(combined, indent=1, sort_keys=True) + "\n")
    _write_text(_sibling(report_path, ".csv"), "\n".join(csv_rows) + "\n")
    print(f"runtime {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if args.strict and not passed:
        raise QciaError("one or more ordering assertions failed")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = gradcheck_suite(cfg.seed, args.nets, step=args.step)
    for r in results:
        print(r.line())
    worst = max(r.error for r in results)
    ok = worst < GRADCHECK_TOL
    print(f"max_rel_err={worst:.3e} tol={GRADCHECK_TOL:.0e} {'pass' if ok else 'FAIL'}")
    if not ok:
        raise QciaError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOL}")
    return 0


# -------------------------------------------------------------- parser ----

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply without it)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")

    p = _Parser(prog="qcia", description="Quality-classified image analysis toolkit.")
    p.add_argument("--version", action="version", version=f"qcia {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("corpus", parents=[common], help="write a synthetic desk corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=12)
    s.add_argument("--size", type=int, default=96)
    s.set_defaults(func=cmd_corpus)

    s = sub.add_parser("degrade", parents=[common], help="build degraded datasets and a manifest")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--class", dest="quality_class", help="single class, e.g. BJ:3 or G")
    g.add_argument("--mixed", action="store_true", help="one seeded random class per image")
    s.add_argument("--manifest", help="manifest path (default OUT/manifest.json)")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train-quality", parents=[common], help="train one predictor network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--net", required=True, choices=sorted(NET_KINDS))
    s.add_argument("--out", required=True, help="checkpoint path, or a bundle directory")
    s.add_argument("--resume", help="checkpoint to continue training from")
    s.set_defaults(func=cmd_train_quality)

    s = sub.add_parser("predict-quality", parents=[common], help="fused quality vector for one image")
    s.add_argument("--bundle", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--patches", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_predict_quality)

    s = sub.add_parser("eval", parents=[common], help="mixed-quality routing evaluation")
    s.add_argument("--task", required=True, choices=["detect", "recognize"])
    s.add_argument("--registry", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--report", required=True)
    s.add_argument("--bundle", help="trained predictor bundle (default: simulated predictor)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", parents=[common], help="synthetic experiments from a config")
    s.add_argument("--report", required=True)
    s.add_argument("--task", choices=["detect", "recognize"])
    s.add_argument("--strict", action="store_true", help="exit 1 when an assertion fails")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on random nets")
    s.add_argument("--nets", type=int, default=20)
    s.add_argument("--step", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"qcia-error: usage: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    if args.threads < 1:
        print("qcia-error: usage: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _seeded(_load_config(args.config), args.seed)
        return args.func(args, cfg)
    except (QciaError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        name = type(exc).__name__
        print(f"qcia-error: {name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
