"""Command-line pipeline: synth, fit, infer, eval, ablate, sweep, breakdown, inspect.

Config precedence is flags > config file (key = value) > defaults, and the
effective configuration is echoed into a JSON run manifest next to every
output, together with acquisition/inference wall-clock timings. Exit codes:
0 success, 1 data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import evaluation, paa, pvcl, store, synth
from .config import ALPHA_SWEEP_GRID, K_SWEEP_GRID, PipelineConfig
from .errors import ConfigError, PiaaError


class UsageError(Exception):
    """Command-line misuse (maps to exit code 2)."""


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
_BOOL_FIELDS = {
    "secondary_softmax", "cls_via_gda", "stage1_shrinkage",
    "self_consistent_covariance", "transductive", "allow_empty_classes",
    "normalize",
}


def _parse_config_file(path: str) -> dict:
    out: dict = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            if key in _BOOL_FIELDS:
                out[key] = value.lower() in ("1", "true", "yes")
            elif key in ("k", "threads", "seed"):
                out[key] = int(value)
            elif key == "mode":
                out[key] = value
            else:
                out[key] = float(value)
    return out


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    vals: dict = {}
    if getattr(args, "config", None):
        vals.update(_parse_config_file(args.config))
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            vals[name] = flag
    if vals.get("threads") is None:
        env = os.environ.get("PIAA_THREADS")
        vals["threads"] = int(env) if env else os.cpu_count()
    return PipelineConfig(**vals)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (flags win over it)")
    p.add_argument("-k", "--k", type=int, default=None, dest="k",
                   help="memory-bank capacity per class (default 512)")
    p.add_argument("--alpha", type=float, default=None,
                   help="patch/cls fusion weight in [0,1] (default 0.9)")
    p.add_argument("--logit-scale", type=float, default=None, dest="logit_scale",
                   help="cosine softmax scale (default 100)")
    p.add_argument("--temperature", type=float, default=None, dest="secondary_temperature",
                   help="secondary softmax temperature (default 1.0)")
    p.add_argument("--mode", choices=("full", "patch_only", "cls_only"), default=None)
    p.add_argument("--no-secondary-softmax", dest="secondary_softmax",
                   action="store_false", default=None,
                   help="rank by raw max-pooled patch probabilities")
    p.add_argument("--cls-via-gda", dest="cls_via_gda", action="store_true", default=None,
                   help="score the [CLS] vector through the fitted classifier")
    p.add_argument("--stage1-no-shrinkage", dest="stage1_shrinkage",
                   action="store_false", default=None,
                   help="use the raw pooled covariance in Stage I (ablation)")
    p.add_argument("--self-consistent-covariance", dest="self_consistent_covariance",
                   action="store_true", default=None,
                   help="use the unbiased pooled covariance in the shrinkage formula")
    p.add_argument("--transductive", action="store_true", default=None,
                   help="build memory banks from the evaluation images themselves")
    p.add_argument("--allow-empty-classes", dest="allow_empty_classes",
                   action="store_true", default=None,
                   help="do not fail when some class has no positive labels")
    p.add_argument("--no-normalize", dest="normalize", action="store_false", default=None,
                   help="skip ingestion L2 normalization (ablation)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: available parallelism or PIAA_THREADS)")
    p.add_argument("--seed", type=int, default=None)


def _load_manifest_paths(args: argparse.Namespace) -> None:
    """Optional JSON manifest supplying default input paths."""
    if not getattr(args, "manifest", None):
        return
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    for key in ("embeddings", "prototypes", "adapt_embeddings", "classifier"):
        if getattr(args, key, None) is None and key in manifest:
            setattr(args, key, manifest[key])


def _write_run_manifest(path: Path, command: str, cfg: PipelineConfig,
                        inputs: dict, outputs: list, acquisition: float,
                        inference: float, extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "config_digest": cfg.digest(),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": [str(p) for p in outputs],
        "timings": {
            "acquisition_seconds": acquisition,
            "inference_seconds": inference,
        },
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_sets(args: argparse.Namespace, cfg: PipelineConfig, need_labels: bool):
    eval_set = store.read_embedding_file(args.embeddings, normalize=cfg.normalize)
    prototypes = store.read_text_prototypes(args.prototypes)
    if need_labels and eval_set.labels is None:
        raise PiaaError(f"{args.embeddings} carries no labels; evaluation needs them")
    adapt = None
    if getattr(args, "adapt_embeddings", None):
        adapt = store.read_embedding_file(args.adapt_embeddings, normalize=cfg.normalize)
    elif not cfg.transductive:
        raise UsageError(
            "provide --adapt-embeddings for a separate adaptation split, or pass "
            "--transductive to build banks from the evaluation images"
        )
    return eval_set, prototypes, adapt


def _fit_metadata(cfg: PipelineConfig, report: pvcl.FitReport) -> dict:
    config = dataclasses.asdict(cfg)
    config.pop("threads")            # execution detail; keeps .piac bytes thread-invariant
    return {
        "config": config,
        "config_digest": cfg.digest(),
        "bootstrap_sizes": list(report.bootstrap_sizes),
        "purified_sizes": list(report.purified_sizes),
        "fallback_classes": list(report.fallback_classes),
        "num_patches": report.num_patches,
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.spec:
        base = synth.load_spec(args.spec)
        if args.seed is not None:
            base = dataclasses.replace(base, seed=args.seed)
    else:
        base = synth.make_spec(
            num_classes=args.classes, dim=args.dim, images=args.images,
            patches_per_image=args.patches_per_image, mean_scale=args.mean_scale,
            cov_scale=args.cov_scale, rotation_deg=args.rotation_deg,
            offset=args.offset,
            small_object_classes=tuple(int(c) for c in args.small_classes.split(",") if c)
            if args.small_classes else (),
            small_object_fraction=args.small_fraction,
            max_classes_per_image=args.max_classes_per_image,
            cls_noise=args.cls_noise, seed=cfg.seed,
        )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    train = synth.generate(base)
    eval_spec = dataclasses.replace(base, seed=base.seed + 1)
    eval_data = synth.generate(eval_spec)
    acquisition = time.monotonic() - t0

    outputs = []
    for name, data in (("train", train), ("eval", eval_data)):
        p = out / f"{name}.piaa"
        store.write_embedding_file(data.embeddings, p)
        outputs.append(p)
    proto_path = out / "prototypes.piaa"
    store.write_text_prototypes(train.prototypes, proto_path)
    truth_path = out / "ground_truth.piac"
    pvcl.write_classifier_file(train.ground_truth, truth_path,
                               metadata={"source": "synthetic-ground-truth",
                                         "seed": base.seed})
    outputs += [proto_path, truth_path]
    _write_run_manifest(out / "manifest.json", "synth", cfg, {"spec": args.spec},
                        outputs, acquisition, 0.0,
                        extra={"generator_seed": base.seed})
    print(f"wrote {len(outputs)} files to {out}")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    embeddings = store.read_embedding_file(args.embeddings, normalize=cfg.normalize)
    prototypes = store.read_text_prototypes(args.prototypes)
    clf, report = pvcl.run_pvcl(
        embeddings.without_labels(), prototypes, k=cfg.k, logit_scale=cfg.logit_scale,
        stage1_shrinkage=cfg.stage1_shrinkage,
        self_consistent=cfg.self_consistent_covariance, threads=cfg.threads,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pvcl.write_classifier_file(clf, out, metadata=_fit_metadata(cfg, report))
    _write_run_manifest(Path(str(out) + ".manifest.json"), "fit", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes},
                        [out], report.seconds, 0.0,
                        extra={"fit": _fit_metadata(cfg, report)})
    print(f"fitted {clf.num_classes}-class classifier from {report.num_patches} patches "
          f"in {report.seconds:.2f}s -> {out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    embeddings = store.read_embedding_file(args.embeddings, normalize=cfg.normalize)
    prototypes = store.read_text_prototypes(args.prototypes)
    clf, _ = pvcl.read_classifier_file(args.classifier)
    t0 = time.monotonic()
    report = paa.score_images(
        clf, embeddings.without_labels(), prototypes, alpha=cfg.alpha,
        temperature=cfg.secondary_temperature, logit_scale=cfg.logit_scale,
        mode=cfg.mode, secondary_softmax=cfg.secondary_softmax,
        cls_via_gda=cfg.cls_via_gda, threads=cfg.threads,
    )
    inference = time.monotonic() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "jsonl":
        paa.write_scores_jsonl(report, out)
    else:
        paa.write_scores_csv(report, out)
    outputs = [out]
    if args.dump_patch_scores:
        dump = Path(args.dump_patch_scores)
        paa.write_patch_scores_csv(clf, embeddings.without_labels(),
                                   prototypes.class_names, dump)
        outputs.append(dump)
    _write_run_manifest(Path(str(out) + ".manifest.json"), "infer", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes,
                         "classifier": args.classifier},
                        outputs, 0.0, inference)
    print(f"scored {embeddings.num_images} images -> {out}")
    return 0


def _check_undefined(result: evaluation.EvalResult, cfg: PipelineConfig) -> int:
    if result.undefined_classes and not cfg.allow_empty_classes:
        names = [result.class_names[c] if result.class_names else str(c)
                 for c in result.undefined_classes]
        print(f"error: classes with zero positives (AP undefined): {', '.join(names)}; "
              "pass --allow-empty-classes to proceed", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_set = store.read_embedding_file(args.embeddings, normalize=cfg.normalize)
    prototypes = store.read_text_prototypes(args.prototypes)
    if eval_set.labels is None:
        raise PiaaError(f"{args.embeddings} carries no labels; evaluation needs them")

    acquisition = 0.0
    if args.classifier:
        clf, _ = pvcl.read_classifier_file(args.classifier)
    else:
        adapt = None
        if args.adapt_embeddings:
            adapt = store.read_embedding_file(args.adapt_embeddings, normalize=cfg.normalize)
        elif not cfg.transductive:
            raise UsageError(
                "provide --classifier, --adapt-embeddings, or --transductive"
            )
        clf, fit_report = evaluation.fit_classifier(eval_set, prototypes, cfg, adapt)
        acquisition = fit_report.seconds

    t0 = time.monotonic()
    report = paa.score_images(
        clf, eval_set.without_labels(), prototypes, alpha=cfg.alpha,
        temperature=cfg.secondary_temperature, logit_scale=cfg.logit_scale,
        mode=cfg.mode, secondary_softmax=cfg.secondary_softmax,
        cls_via_gda=cfg.cls_via_gda, threads=cfg.threads,
    )
    result = evaluation.evaluate(report.s_fused, eval_set.labels, eval_set.image_ids,
                                 prototypes.class_names, cfg.digest())
    inference = time.monotonic() - t0
    evaluation.eval_to_json(result, out / "report.json")
    evaluation.eval_to_csv(result, out / "report.csv")
    _write_run_manifest(out / "manifest.json", "eval", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes,
                         "classifier": args.classifier,
                         "adapt_embeddings": args.adapt_embeddings},
                        [out / "report.json", out / "report.csv"],
                        acquisition, inference)
    print(f"mAP = {result.map:.6f} over {len(result.per_class_ap)} classes "
          f"({len(result.undefined_classes)} undefined)")
    return _check_undefined(result, cfg)


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_set, prototypes, adapt = _load_sets(args, cfg, need_labels=True)
    t0 = time.monotonic()
    rows = evaluation.ablation_grid(eval_set, prototypes, cfg, adapt)
    elapsed = time.monotonic() - t0
    evaluation.ablation_to_csv(rows, out / "ablation.csv")
    _write_run_manifest(out / "manifest.json", "ablate", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes,
                         "adapt_embeddings": args.adapt_embeddings},
                        [out / "ablation.csv"], 0.0, elapsed)
    print("pvcl paa      mAP")
    for r in rows:
        cells = ["yes " if b else " -  " for b in (r.pvcl, r.paa)]
        print(f"{cells[0]} {cells[1]} {r.result.map:.6f}")
    rc = 0
    for r in rows:
        rc = rc or _check_undefined(r.result, cfg)
    return rc


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_set, prototypes, adapt = _load_sets(args, cfg, need_labels=True)
    if args.values:
        values = [float(v) for v in args.values.replace(",", " ").split()]
    else:
        values = list(K_SWEEP_GRID if args.param == "K" else ALPHA_SWEEP_GRID)
    t0 = time.monotonic()
    points = evaluation.sweep(eval_set, prototypes, args.param, values, cfg, adapt)
    elapsed = time.monotonic() - t0
    evaluation.sweep_to_csv(args.param, points, out / "sweep.csv")
    _write_run_manifest(out / "manifest.json", "sweep", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes,
                         "adapt_embeddings": args.adapt_embeddings},
                        [out / "sweep.csv"], 0.0, elapsed,
                        extra={"param": args.param, "values": values})
    for p in points:
        print(f"{args.param}={p.value:g}  mAP={p.result.map:.6f}")
    return 0


def _parse_subsets(args: argparse.Namespace) -> dict:
    if args.subsets_file:
        with open(args.subsets_file) as fh:
            return {str(k): list(v) for k, v in json.load(fh).items()}
    if not args.subsets:
        raise UsageError("provide --subsets or --subsets-file")
    out = {}
    for part in args.subsets.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad subset spec {part!r}; expected name=class1,class2")
        name, classes = part.split("=", 1)
        out[name.strip()] = [c.strip() for c in classes.split(",") if c.strip()]
    return out


def _cmd_breakdown(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _load_manifest_paths(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_set, prototypes, adapt = _load_sets(args, cfg, need_labels=True)
    subsets = _parse_subsets(args)
    t0 = time.monotonic()
    rows = evaluation.scale_breakdown(eval_set, prototypes, cfg, subsets, adapt)
    elapsed = time.monotonic() - t0
    evaluation.breakdown_to_csv(rows, out / "breakdown.csv")
    _write_run_manifest(out / "manifest.json", "breakdown", cfg,
                        {"embeddings": args.embeddings, "prototypes": args.prototypes,
                         "adapt_embeddings": args.adapt_embeddings},
                        [out / "breakdown.csv"], 0.0, elapsed)
    print(f"{'subset':10s} {'class':16s} {'cls':>8s} {'patch':>8s} {'fused':>8s}")
    for r in rows:
        print(f"{r.subset:10s} {r.class_name:16s} {r.ap_cls_only:8.4f} "
              f"{r.ap_patch_only:8.4f} {r.ap_fused:8.4f}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.file)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == pvcl.MAGIC_CLASSIFIER:
        clf, metadata = pvcl.read_classifier_file(path)
        print(f"{path}: classifier, C={clf.num_classes}, d={clf.dim}, "
              f"provenance={clf.provenance}, fallback={sorted(clf.fallback_classes)}")
        print(f"metadata: {json.dumps(metadata, sort_keys=True)}")
        return 0
    try:
        tp = store.read_text_prototypes(path)
        print(f"{path}: text prototypes, C={tp.num_classes}, d={tp.dim}")
        print("classes:", ", ".join(tp.class_names))
        return 0
    except PiaaError:
        pass
    es = store.read_embedding_file(path)
    labels = "none" if es.labels is None else f"{es.labels.shape[1]} classes"
    counts = es.patch_counts()
    print(f"{path}: embeddings, images={es.num_images}, patches={es.num_patches}, "
          f"d={es.dim}, labels={labels}")
    if es.num_images:
        print(f"patches/image: min={int(counts.min())}, max={int(counts.max())}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="piaa",
        description="Training-free multi-label inference from patch embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--spec", help="key = value spec file")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--images", type=int, default=300)
    p.add_argument("--patches-per-image", type=int, default=24)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--cov-scale", type=float, default=0.05)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--small-classes", default="")
    p.add_argument("--small-fraction", type=float, default=0.1)
    p.add_argument("--max-classes-per-image", type=int, default=3)
    p.add_argument("--cls-noise", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="fit a classifier from unlabeled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="JSON manifest supplying default input paths")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("infer", help="score images with a fitted classifier")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--dump-patch-scores", help="also dump per-patch probabilities (CSV)")
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate mAP on a labeled set")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--classifier")
    p.add_argument("--adapt-embeddings", dest="adapt_embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="the four-cell component ablation grid")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--adapt-embeddings", dest="adapt_embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over K or alpha")
    p.add_argument("--param", choices=("K", "alpha"), required=True)
    p.add_argument("--values", help="comma-separated grid (default: 128..1536 for K, "
                                    "0..1 step 0.1 for alpha)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--adapt-embeddings", dest="adapt_embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("breakdown", help="per-class cls/patch/fused AP for class subsets")
    p.add_argument("--subsets", help='e.g. "large=horse,cow;small=bottle"')
    p.add_argument("--subsets-file", help="JSON file {subset: [class, ...]}")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--adapt-embeddings", dest="adapt_embeddings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_breakdown)

    p = sub.add_parser("inspect", help="summarize a .piaa/.piac file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PiaaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
