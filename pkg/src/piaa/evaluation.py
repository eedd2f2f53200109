"""Ranking metrics (per-class AP, mAP) and the analysis drivers built on them.

AP is the all-points area under the precision/recall curve of the
descending-score ranking, with ties broken by ascending original index (by
image-id rank at the evaluate level, so the metric is invariant to row
permutations). Precision terms are accumulated with math.fsum, which makes
the result independent of summation order and lets tests demand exact
agreement with the brute-force pairwise oracle.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import paa
from .config import PipelineConfig
from .errors import EvalError
from .pvcl import FitReport, GdaClassifier, run_pvcl
from .store import EmbeddingSet, TextPrototypeSet


def average_precision(scores: np.ndarray, labels: np.ndarray,
                      tie_key: np.ndarray | None = None) -> float:
    """All-points AP of one ranking; NaN (the distinguished "undefined"
    value) when there are no positives - never silently 0."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise EvalError(f"scores shape {s.shape} does not match labels {y.shape}")
    y = y.astype(bool)
    num_pos = int(y.sum())
    if num_pos == 0:
        return float("nan")
    key = np.arange(len(s)) if tie_key is None else np.asarray(tie_key)
    order = np.lexsort((key, -s))
    hits = np.cumsum(y[order])
    ranks = np.arange(1, len(s) + 1)
    at_pos = y[order]
    return math.fsum((hits[at_pos] / ranks[at_pos]).tolist()) / num_pos


@dataclass(frozen=True, eq=False)
class EvalResult:
    per_class_ap: np.ndarray          # (C,) float, NaN where undefined
    map: float                        # mean over classes with >=1 positive
    num_pos: np.ndarray               # (C,) int
    undefined_classes: tuple[int, ...]
    config_digest: str
    class_names: tuple[str, ...] = ()


def evaluate(scores: np.ndarray, labels: np.ndarray,
             image_ids: Sequence[str] | None = None,
             class_names: Sequence[str] = (),
             config_digest: str = "") -> EvalResult:
    """Per-class AP over the image ranking of one score matrix, plus mAP.

    Classes with zero positives are excluded from the mean and flagged in
    ``undefined_classes``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape != y.shape:
        raise EvalError(f"scores shape {s.shape} does not match labels {y.shape}")
    tie_key = None
    if image_ids is not None:
        if len(image_ids) != s.shape[0]:
            raise EvalError("image_ids length does not match score rows")
        tie_key = np.argsort(np.argsort(np.asarray(image_ids, dtype=object), kind="stable"))
    aps = np.array([average_precision(s[:, c], y[:, c], tie_key) for c in range(s.shape[1])])
    num_pos = y.astype(bool).sum(axis=0).astype(np.int64)
    defined = ~np.isnan(aps)
    mean_ap = math.fsum(aps[defined].tolist()) / int(defined.sum()) if defined.any() else float("nan")
    return EvalResult(
        per_class_ap=aps,
        map=mean_ap,
        num_pos=num_pos,
        undefined_classes=tuple(int(c) for c in np.flatnonzero(~defined)),
        config_digest=config_digest,
        class_names=tuple(class_names),
    )


# ---------------------------------------------------------------------------
# pipeline drivers


def fit_classifier(eval_set: EmbeddingSet, prototypes: TextPrototypeSet,
                   cfg: PipelineConfig,
                   adapt_set: EmbeddingSet | None = None) -> tuple[GdaClassifier, FitReport]:
    """Fit on the adaptation split, or transductively on the evaluation images."""
    source = adapt_set if adapt_set is not None else eval_set
    return run_pvcl(
        source.without_labels(), prototypes,
        k=cfg.k, logit_scale=cfg.logit_scale,
        stage1_shrinkage=cfg.stage1_shrinkage,
        self_consistent=cfg.self_consistent_covariance,
        threads=cfg.threads,
    )


def _require_labels(eval_set: EmbeddingSet, num_classes: int) -> np.ndarray:
    if eval_set.labels is None:
        raise EvalError("evaluation requires an embedding set with labels")
    if eval_set.labels.shape[1] != num_classes:
        raise EvalError(
            f"label columns ({eval_set.labels.shape[1]}) do not match "
            f"class count ({num_classes})"
        )
    return eval_set.labels


def _score(classifier, eval_set, prototypes, cfg: PipelineConfig, mode: str,
           secondary_softmax: bool, alpha: float | None = None) -> paa.ScoreReport:
    return paa.score_images(
        classifier, eval_set, prototypes,
        alpha=cfg.alpha if alpha is None else alpha,
        temperature=cfg.secondary_temperature,
        logit_scale=cfg.logit_scale,
        mode=mode,
        secondary_softmax=secondary_softmax,
        cls_via_gda=cfg.cls_via_gda,
        threads=cfg.threads,
    )


@dataclass(frozen=True)
class AblationRow:
    pvcl: bool
    paa: bool
    result: EvalResult


def ablation_grid(eval_set: EmbeddingSet, prototypes: TextPrototypeSet,
                  cfg: PipelineConfig,
                  adapt_set: EmbeddingSet | None = None) -> list[AblationRow]:
    """The four-cell grid {-,-}, {-,PAA}, {PVCL,-}, {PVCL,PAA}.

    "No PAA" scores images by the raw max-pooled patch probability (no
    secondary softmax, no [CLS] fusion); "no PVCL" swaps the fitted
    classifier for text-prototype patch scoring.
    """
    labels = _require_labels(eval_set, prototypes.num_classes)
    digest = cfg.digest()
    text = paa.TextScorer(prototypes, cfg.logit_scale)
    gda, _ = fit_classifier(eval_set, prototypes, cfg, adapt_set)
    rows = []
    for use_pvcl, use_paa in ((False, False), (False, True), (True, False), (True, True)):
        scorer = gda if use_pvcl else text
        if use_paa:
            report = _score(scorer, eval_set, prototypes, cfg, "full", cfg.secondary_softmax)
        else:
            report = _score(scorer, eval_set, prototypes, cfg, "patch_only", False)
        result = evaluate(report.s_fused, labels, eval_set.image_ids,
                          prototypes.class_names, digest)
        rows.append(AblationRow(pvcl=use_pvcl, paa=use_paa, result=result))
    return rows


@dataclass(frozen=True)
class SweepPoint:
    value: float
    result: EvalResult


def sweep(eval_set: EmbeddingSet, prototypes: TextPrototypeSet, param: str,
          values: Sequence[float], cfg: PipelineConfig,
          adapt_set: EmbeddingSet | None = None) -> list[SweepPoint]:
    """One EvalResult per grid value of ``K`` or ``alpha``.

    The alpha sweep fits once and re-fuses the stored patch/cls matrices;
    the K sweep refits per value.
    """
    labels = _require_labels(eval_set, prototypes.num_classes)
    points = []
    if param == "alpha":
        gda, _ = fit_classifier(eval_set, prototypes, cfg, adapt_set)
        report = _score(gda, eval_set, prototypes, cfg, "full", cfg.secondary_softmax)
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"alpha value {v} outside [0, 1]")
            fused = v * report.s_patch + (1.0 - v) * report.s_cls
            digest = dataclasses.replace(cfg, alpha=float(v)).digest()
            points.append(SweepPoint(float(v), evaluate(
                fused, labels, eval_set.image_ids, prototypes.class_names, digest)))
    elif param == "K":
        for v in values:
            k = int(v)
            kcfg = dataclasses.replace(cfg, k=k)
            gda, _ = fit_classifier(eval_set, prototypes, kcfg, adapt_set)
            report = _score(gda, eval_set, prototypes, kcfg, "full", kcfg.secondary_softmax)
            points.append(SweepPoint(float(k), evaluate(
                report.s_fused, labels, eval_set.image_ids,
                prototypes.class_names, kcfg.digest())))
    else:
        raise EvalError(f"sweep parameter must be 'K' or 'alpha', got {param!r}")
    return points


@dataclass(frozen=True)
class BreakdownRow:
    subset: str
    class_name: str
    ap_cls_only: float
    ap_patch_only: float
    ap_fused: float


def scale_breakdown(eval_set: EmbeddingSet, prototypes: TextPrototypeSet,
                    cfg: PipelineConfig,
                    class_subsets: Mapping[str, Sequence[str]],
                    adapt_set: EmbeddingSet | None = None) -> list[BreakdownRow]:
    """Per-class AP under cls-only, patch-only, and fused scoring for named
    class subsets (the large-vs-small complementarity view)."""
    labels = _require_labels(eval_set, prototypes.num_classes)
    name_to_idx = {n: i for i, n in enumerate(prototypes.class_names)}
    for subset, names in class_subsets.items():
        for n in names:
            if n not in name_to_idx:
                raise EvalError(f"unknown class name {n!r} in subset {subset!r}")
    gda, _ = fit_classifier(eval_set, prototypes, cfg, adapt_set)
    report = _score(gda, eval_set, prototypes, cfg, "full", cfg.secondary_softmax)
    digest = cfg.digest()
    by_matrix = {
        "cls": evaluate(report.s_cls, labels, eval_set.image_ids, prototypes.class_names, digest),
        "patch": evaluate(report.s_patch, labels, eval_set.image_ids, prototypes.class_names, digest),
        "fused": evaluate(report.s_fused, labels, eval_set.image_ids, prototypes.class_names, digest),
    }
    rows = []
    for subset, names in class_subsets.items():
        for n in names:
            c = name_to_idx[n]
            rows.append(BreakdownRow(
                subset=subset,
                class_name=n,
                ap_cls_only=float(by_matrix["cls"].per_class_ap[c]),
                ap_patch_only=float(by_matrix["patch"].per_class_ap[c]),
                ap_fused=float(by_matrix["fused"].per_class_ap[c]),
            ))
    return rows


# ---------------------------------------------------------------------------
# report files (fixed column order)


def eval_to_json(result: EvalResult, path) -> None:
    payload = {
        "map": None if math.isnan(result.map) else result.map,
        "per_class": [
            {
                "class": result.class_names[c] if result.class_names else str(c),
                "num_pos": int(result.num_pos[c]),
                "ap": None if math.isnan(result.per_class_ap[c]) else float(result.per_class_ap[c]),
            }
            for c in range(len(result.per_class_ap))
        ],
        "undefined_classes": list(result.undefined_classes),
        "config_digest": result.config_digest,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def eval_to_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "num_pos", "ap"])
        for c in range(len(result.per_class_ap)):
            name = result.class_names[c] if result.class_names else str(c)
            ap = result.per_class_ap[c]
            w.writerow([name, int(result.num_pos[c]), "" if math.isnan(ap) else repr(float(ap))])


def ablation_to_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pvcl", "paa", "map"])
        for r in rows:
            w.writerow([int(r.pvcl), int(r.paa), repr(float(r.result.map))])


def sweep_to_csv(param: str, points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "map"])
        for p in points:
            w.writerow([param, repr(float(p.value)), repr(float(p.result.map))])


def breakdown_to_csv(rows: list[BreakdownRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "class", "ap_cls_only", "ap_patch_only", "ap_fused"])
        for r in rows:
            w.writerow([r.subset, r.class_name, repr(r.ap_cls_only),
                        repr(r.ap_patch_only), repr(r.ap_fused)])
