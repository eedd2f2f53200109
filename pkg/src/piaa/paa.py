"""Patch-score aggregation into image-level multi-label distributions.

Per image: row-softmax the patch logits, max-pool each class over patches,
recalibrate the pooled peaks with a secondary softmax (optional temperature)
and fuse with the global [CLS] zero-shot distribution:

    s_fused = alpha * s_patch + (1 - alpha) * s_cls.

Any object with a ``patch_logits(X) -> (N, C)`` method can drive the patch
path: a fitted GdaClassifier, or TextScorer for the prototype-only baseline.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .config import (
    DEFAULT_ALPHA,
    DEFAULT_LOGIT_SCALE,
    DEFAULT_SECONDARY_TEMPERATURE,
    MODES,
)
from .errors import EvalError
from .numerics import DEFAULT_CHUNK, run_chunks, softmax, unit_rows
from .store import EmbeddingSet, TextPrototypeSet


class TextScorer:
    """Cosine text-prototype patch scorer (the no-adaptation baseline)."""

    def __init__(self, prototypes: TextPrototypeSet,
                 logit_scale: float = DEFAULT_LOGIT_SCALE):
        self.logit_scale = float(logit_scale)
        self.dim = prototypes.dim
        self.num_classes = prototypes.num_classes
        self._proto = unit_rows(prototypes.prototypes)

    def patch_logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise EvalError(f"dimension mismatch: patches d={x.shape[-1]}, "
                            f"prototypes d={self.dim}")
        return self.logit_scale * (unit_rows(x) @ self._proto.T)


@dataclass(frozen=True, eq=False)
class ImageScores:
    """The three per-image distributions and the fusion weight that tied them.

    All three vectors sum to 1 when the secondary softmax is enabled (the
    --no-secondary-softmax ablation leaves s_patch as raw max-pooled
    probabilities, which need not normalize).
    """

    s_patch: np.ndarray
    s_cls: np.ndarray
    s_fused: np.ndarray
    alpha: float


@dataclass(frozen=True, eq=False)
class ScoreReport:
    """Batch scores: one row per image in each matrix."""

    image_ids: tuple[str, ...]
    class_names: tuple[str, ...]
    s_patch: np.ndarray
    s_cls: np.ndarray
    s_fused: np.ndarray
    alpha: float
    mode: str


def patch_probs(scorer, patches: np.ndarray) -> np.ndarray:
    """Row-wise softmax of the scorer's patch logits (m x C)."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EvalError("patch_probs needs at least one patch row")
    return softmax(scorer.patch_logits(p), axis=1)


def aggregate_patch_scores(
    probs: np.ndarray,
    temperature: float = DEFAULT_SECONDARY_TEMPERATURE,
    secondary_softmax: bool = True,
) -> np.ndarray:
    """Max-pool each class over patches, then softmax(v / temperature).

    With ``secondary_softmax=False`` the raw pooled maxima are returned
    (ablation: scores in [0,1] that do not sum to one).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EvalError("cannot aggregate an image with no patches")
    if temperature <= 0.0:
        raise EvalError("secondary softmax temperature must be positive")
    pooled = p.max(axis=0)
    if not secondary_softmax:
        return pooled
    return softmax(pooled / temperature, axis=-1)


def cls_scores(cls_embedding: np.ndarray, prototypes: TextPrototypeSet,
               logit_scale: float = DEFAULT_LOGIT_SCALE) -> np.ndarray:
    """Softmax of scaled cosine similarity between the [CLS] vector and prototypes."""
    v = np.asarray(cls_embedding, dtype=np.float64).reshape(-1)
    if v.shape[0] != prototypes.dim:
        raise EvalError(f"dimension mismatch: cls d={v.shape[0]}, "
                        f"prototypes d={prototypes.dim}")
    cos = unit_rows(v[None, :]) @ unit_rows(prototypes.prototypes).T
    return softmax(logit_scale * cos, axis=1)[0]


def fuse(s_patch: np.ndarray, s_cls: np.ndarray, alpha: float = DEFAULT_ALPHA) -> ImageScores:
    """Convex combination alpha * s_patch + (1 - alpha) * s_cls."""
    if not 0.0 <= alpha <= 1.0:
        raise EvalError(f"alpha must lie in [0, 1], got {alpha}")
    sp = np.asarray(s_patch, dtype=np.float64)
    sc = np.asarray(s_cls, dtype=np.float64)
    if sp.shape != sc.shape:
        raise EvalError(f"score shapes differ: {sp.shape} vs {sc.shape}")
    return ImageScores(s_patch=sp, s_cls=sc, s_fused=alpha * sp + (1.0 - alpha) * sc,
                       alpha=alpha)


def infer_image(
    classifier,
    set_: EmbeddingSet,
    image_index: int,
    prototypes: TextPrototypeSet,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_SECONDARY_TEMPERATURE,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    mode: str = "full",
    secondary_softmax: bool = True,
    cls_via_gda: bool = False,
) -> ImageScores:
    """Score one image. Modes force the fusion weight: patch_only -> alpha=1,
    cls_only -> alpha=0 (patches are then never touched; s_patch is a uniform
    placeholder so the result is still a valid triple)."""
    if mode not in MODES:
        raise EvalError(f"mode must be one of {MODES}, got {mode!r}")
    set_ = set_.without_labels()
    num_classes = prototypes.num_classes
    if mode == "cls_only":
        s_patch = np.full(num_classes, 1.0 / num_classes)
        alpha = 0.0
    else:
        p = patch_probs(classifier, set_.image_patches(image_index))
        s_patch = aggregate_patch_scores(p, temperature, secondary_softmax)
        if mode == "patch_only":
            alpha = 1.0
    if mode == "patch_only":
        s_cls = np.full(num_classes, 1.0 / num_classes)
    elif cls_via_gda:
        s_cls = softmax(classifier.patch_logits(
            set_.cls[image_index].astype(np.float64)[None, :]), axis=1)[0]
    else:
        s_cls = cls_scores(set_.cls[image_index], prototypes, logit_scale)
    return fuse(s_patch, s_cls, alpha)


def score_images(
    classifier,
    set_: EmbeddingSet,
    prototypes: TextPrototypeSet,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_SECONDARY_TEMPERATURE,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    mode: str = "full",
    secondary_softmax: bool = True,
    cls_via_gda: bool = False,
    chunk: int = DEFAULT_CHUNK,
    threads: int | None = None,
) -> ScoreReport:
    """Vectorized batch scoring: one patch-scoring pass over the whole set.

    Patch probabilities are computed in fixed chunks (thread-count never
    changes the bits) and max-pooled per image with reduceat.
    """
    if mode not in MODES:
        raise EvalError(f"mode must be one of {MODES}, got {mode!r}")
    set_ = set_.without_labels()
    n_img = set_.num_images
    num_classes = prototypes.num_classes
    eff_alpha = {"full": alpha, "patch_only": 1.0, "cls_only": 0.0}[mode]

    if mode == "cls_only":
        s_patch = np.full((n_img, num_classes), 1.0 / num_classes)
    else:
        counts = set_.patch_offsets[:, 1]
        if np.any(counts == 0):
            bad = int(np.argmax(counts == 0))
            raise EvalError(f"image {set_.image_ids[bad]!r} has no patches to aggregate")
        m = set_.num_patches
        probs = np.empty((m, num_classes))

        def work(sl: slice) -> None:
            probs[sl] = softmax(classifier.patch_logits(set_.patches[sl]), axis=1)

        run_chunks(work, m, chunk=chunk, threads=threads)
        pooled = np.maximum.reduceat(probs, set_.patch_offsets[:, 0], axis=0)
        if secondary_softmax:
            s_patch = softmax(pooled / temperature, axis=1)
        else:
            s_patch = pooled

    if mode == "patch_only":
        s_cls = np.full((n_img, num_classes), 1.0 / num_classes)
    elif cls_via_gda:
        s_cls = softmax(classifier.patch_logits(set_.cls.astype(np.float64)), axis=1)
    else:
        cos = unit_rows(set_.cls) @ unit_rows(prototypes.prototypes).T
        s_cls = softmax(logit_scale * cos, axis=1)

    s_fused = eff_alpha * s_patch + (1.0 - eff_alpha) * s_cls
    return ScoreReport(
        image_ids=set_.image_ids,
        class_names=prototypes.class_names,
        s_patch=s_patch,
        s_cls=s_cls,
        s_fused=s_fused,
        alpha=eff_alpha,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# score export


def write_scores_csv(report: ScoreReport, path) -> None:
    """Fixed column order: image_id, patch_*, cls_*, fused_* per class."""
    names = report.class_names
    header = (
        ["image_id"]
        + [f"patch_{c}" for c in names]
        + [f"cls_{c}" for c in names]
        + [f"fused_{c}" for c in names]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, img in enumerate(report.image_ids):
            row = [img]
            row += [repr(float(v)) for v in report.s_patch[i]]
            row += [repr(float(v)) for v in report.s_cls[i]]
            row += [repr(float(v)) for v in report.s_fused[i]]
            w.writerow(row)


def write_scores_jsonl(report: ScoreReport, path) -> None:
    with open(path, "w") as fh:
        for i, img in enumerate(report.image_ids):
            fh.write(json.dumps({
                "image_id": img,
                "s_patch": [float(v) for v in report.s_patch[i]],
                "s_cls": [float(v) for v in report.s_cls[i]],
                "s_fused": [float(v) for v in report.s_fused[i]],
            }, sort_keys=True) + "\n")


def write_patch_scores_csv(classifier, set_: EmbeddingSet,
                           class_names: tuple[str, ...], path,
                           chunk: int = DEFAULT_CHUNK) -> None:
    """Per-patch probability dump for external heatmap rendering."""
    set_ = set_.without_labels()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "patch_index"] + [f"p_{c}" for c in class_names])
        for i, img in enumerate(set_.image_ids):
            x = set_.image_patches(i)
            if len(x) == 0:
                continue
            p = softmax(classifier.patch_logits(x.astype(np.float64)), axis=1)
            for j in range(len(x)):
                w.writerow([img, j] + [repr(float(v)) for v in p[j]])
