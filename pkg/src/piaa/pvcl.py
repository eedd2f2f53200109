"""Closed-form visual classifier learning from unlabeled patch embeddings.

Three stages, no gradients anywhere:

1. bootstrap: per class, keep the top-K argmax-consistent patches with the
   lowest text-alignment entropy;
2. purify: re-score the banks with a preliminary linear-Gaussian classifier
   and keep members whose vision-driven probability clears the per-class
   mean + standard-deviation threshold;
3. final fit: confidence-weighted class prototypes, pooled covariance and a
   trace-regularized shrinkage precision

       precision = d * [(n - 1) * sigma_hat + trace(sigma_hat) * I]^-1

   with sigma_hat the pooled covariance over all n retained members, from
   which the linear classifier follows in closed form:

       w_c = precision @ mu_c,   b_c = -1/2 * mu_c' @ precision @ mu_c.

The solve is a Cholesky factor-and-solve against the class prototypes; the
explicit precision matrix is materialized as well (invariant checks, batch
scoring). All statistics accumulate in float64.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .config import DEFAULT_K, DEFAULT_LOGIT_SCALE
from .errors import FitError, StoreError
from .numerics import DEFAULT_CHUNK, check_prob_matrix, entropy_rows, run_chunks, softmax, unit_rows
from .store import VERSION, EmbeddingSet, TextPrototypeSet, _HEADER, _read_exact

EPS_TRACE_FLOOR = 1e-12

STAGE_BOOTSTRAP = "bootstrap"
STAGE_PURIFIED = "purified"

MAGIC_CLASSIFIER = b"PIAC"


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Per-class selected patch indices. Members are global patch indices,
    stored ascending; every bootstrap member argmaxes to its own class under
    the Stage-I probabilities that built the bank."""

    members: tuple[np.ndarray, ...]
    stage: str
    capacity: int

    @property
    def num_classes(self) -> int:
        return len(self.members)

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(m) for m in self.members)

    def total(self) -> int:
        return sum(len(m) for m in self.members)


@dataclass(frozen=True, eq=False)
class GdaClassifier:
    """Closed-form linear classifier: logits = X @ weights.T + biases.

    ``prototypes`` holds the per-class visual means the weights were derived
    from; ``precision`` the shared shrunk inverse covariance. Classes whose
    bank was empty carry text-derived fallback prototypes and are listed in
    ``fallback_classes``.
    """

    weights: np.ndarray        # (C, d) float64
    biases: np.ndarray         # (C,) float64
    prototypes: np.ndarray     # (C, d) float64
    precision: np.ndarray      # (d, d) float64, symmetric positive-definite
    provenance: str            # "preliminary" | "final"
    fallback_classes: frozenset[int]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def patch_logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.weights.T + self.biases


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Pooled covariance sigma_hat = scatter / n over all bank members."""

    sigma_hat: np.ndarray
    n: int
    trace: float


@dataclass(frozen=True)
class FitReport:
    bootstrap_sizes: tuple[int, ...]
    purified_sizes: tuple[int, ...]
    fallback_classes: tuple[int, ...]
    seconds: float
    k: int
    logit_scale: float
    num_patches: int


# ---------------------------------------------------------------------------
# bank construction


def bootstrap_banks(probs: np.ndarray, entropy: np.ndarray, k: int) -> MemoryBank:
    """Per class: the <=K argmax-c patches with the smallest entropy.

    Ties in entropy are broken by ascending patch index; members are
    returned in ascending index order. Classes no patch argmaxes to get
    empty banks (resolved later by the text-prototype fallback).
    """
    p = check_prob_matrix(probs)
    h = np.asarray(entropy, dtype=np.float64)
    if h.shape != (p.shape[0],):
        raise ValueError(f"entropy shape {h.shape} does not match probs {p.shape}")
    if k < 1:
        raise ValueError("K must be positive")
    return _banks_from_argmax(p.argmax(axis=1), h, k, p.shape[1])


def _banks_from_argmax(argmax: np.ndarray, entropy: np.ndarray, k: int,
                       num_classes: int) -> MemoryBank:
    members = []
    for c in range(num_classes):
        cand = np.flatnonzero(argmax == c)
        if len(cand) > k:
            order = np.lexsort((cand, entropy[cand]))[:k]
            cand = cand[order]
        members.append(np.sort(cand).astype(np.int64))
    return MemoryBank(members=tuple(members), stage=STAGE_BOOTSTRAP, capacity=k)


def _q_rows(members: np.ndarray, q_rows_total: int, q_indices: np.ndarray | None) -> np.ndarray:
    """Map global patch indices to rows of a q matrix."""
    if q_indices is None:
        if len(members) and int(members.max()) >= q_rows_total:
            raise FitError("q matrix does not cover all bank members")
        return members
    pos = np.searchsorted(q_indices, members)
    if np.any(pos >= len(q_indices)) or np.any(q_indices[pos] != members):
        raise FitError("q matrix does not cover all bank members")
    return pos


def purify_banks(bank: MemoryBank, q: np.ndarray,
                 q_indices: np.ndarray | None = None) -> MemoryBank:
    """Keep members with q_{i,c} >= mean + population-std of the class's bank scores.

    A bank whose members all share one q value keeps every member (sigma = 0
    and the threshold is met with equality); a bank the threshold would empty
    retains its single highest-q member (first by ascending index on ties).
    """
    if bank.stage != STAGE_BOOTSTRAP:
        raise FitError(f"purify_banks expects a bootstrap bank, got stage {bank.stage!r}")
    q = np.asarray(q, dtype=np.float64)
    members = []
    for c, m in enumerate(bank.members):
        if len(m) == 0:
            members.append(m)
            continue
        vals = q[_q_rows(m, q.shape[0], q_indices), c]
        if np.all(vals == vals[0]):
            members.append(m)
            continue
        threshold = float(np.mean(vals)) + float(np.std(vals))
        keep = vals >= threshold
        members.append(m[keep] if keep.any() else m[np.argmax(vals) : np.argmax(vals) + 1])
    return MemoryBank(members=tuple(members), stage=STAGE_PURIFIED, capacity=bank.capacity)


# ---------------------------------------------------------------------------
# covariance shrinkage and the closed-form solve


def shrinkage_precision(est: CovarianceEstimate, self_consistent: bool = False) -> np.ndarray:
    """Trace-regularized precision d*[(n-1)*sigma_hat + trace*I]^-1 (symmetrized).

    When trace(sigma_hat) falls below EPS_TRACE_FLOOR the estimate is
    degenerate and the precision collapses to (d / EPS_TRACE_FLOOR) * I.
    ``self_consistent`` switches sigma_hat to the unbiased scatter/(n-1)
    form so that (n-1)*sigma_hat is exactly the scatter matrix.
    """
    precision, _ = _precision_factor(est, self_consistent)
    return precision


def _precision_factor(est: CovarianceEstimate, self_consistent: bool):
    d = est.sigma_hat.shape[0]
    if est.trace < EPS_TRACE_FLOOR:
        return (d / EPS_TRACE_FLOOR) * np.eye(d), None
    if self_consistent:
        if est.n < 2:
            raise FitError("self-consistent covariance needs at least 2 samples")
        scatter = est.sigma_hat * est.n
        a = scatter + (np.trace(scatter) / (est.n - 1)) * np.eye(d)
    else:
        a = (est.n - 1) * est.sigma_hat + est.trace * np.eye(d)
    try:
        factor = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - shrunk matrix is SPD
        raise FitError(f"shrunk covariance is not positive-definite: {exc}") from exc
    precision = d * cho_solve(factor, np.eye(d))
    precision = (precision + precision.T) / 2.0
    return precision, (factor, float(d))


def _closed_form(mu: np.ndarray, precision: np.ndarray, factor) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form weights/biases; solves against the factor when available."""
    if factor is None:
        weights = mu @ precision.T
    else:
        cho, scale = factor
        weights = scale * cho_solve(cho, mu.T).T
    biases = -0.5 * np.einsum("cd,cd->c", mu, weights)
    return weights, biases


def _raw_precision(est: CovarianceEstimate) -> np.ndarray:
    """Plain inverse of the pooled covariance (Stage-I shrinkage ablation)."""
    try:
        factor = cho_factor(est.sigma_hat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FitError(
            "pooled covariance is singular; Stage-I shrinkage is disabled"
        ) from exc
    d = est.sigma_hat.shape[0]
    precision = cho_solve(factor, np.eye(d))
    return (precision + precision.T) / 2.0


# ---------------------------------------------------------------------------
# fitting


def _gather(set_: EmbeddingSet, idx: np.ndarray) -> np.ndarray:
    x = set_.patches[idx].astype(np.float64)
    if not np.isfinite(x).all():
        raise FitError("non-finite patch features in bank")
    return x


def _fit(
    set_: EmbeddingSet,
    bank: MemoryBank,
    member_weights: list[np.ndarray] | None,
    prototypes: TextPrototypeSet | None,
    provenance: str,
    shrinkage: bool,
    self_consistent: bool,
) -> GdaClassifier:
    num_classes = bank.num_classes
    d = set_.dim
    n = bank.total()
    if n == 0:
        raise FitError("no confident patches: every class bank is empty")

    mu = np.zeros((num_classes, d))
    scatter = np.zeros((d, d))
    norm_sum = 0.0
    empty = []
    for c, m in enumerate(bank.members):
        if len(m) == 0:
            empty.append(c)
            continue
        x = _gather(set_, m)
        norm_sum += float(np.linalg.norm(x, axis=1).sum())
        if member_weights is None:
            mu[c] = x.mean(axis=0)
        else:
            w = member_weights[c]
            if not np.isfinite(w).all():
                raise FitError("non-finite confidence weights")
            mu[c] = (w[:, None] * x).sum(axis=0) / w.sum()
        dev = x - mu[c]
        scatter += dev.T @ dev

    if empty:
        if prototypes is None:
            raise FitError(
                f"classes {empty} have empty banks and no text prototypes were "
                "given for the fallback rule"
            )
        scale = norm_sum / n
        fallback_dirs = unit_rows(prototypes.prototypes[empty])
        mu[empty] = scale * fallback_dirs

    sigma_hat = scatter / n
    est = CovarianceEstimate(sigma_hat=sigma_hat, n=n, trace=float(np.trace(sigma_hat)))
    if shrinkage:
        precision, factor = _precision_factor(est, self_consistent)
    else:
        precision, factor = _raw_precision(est), None
    weights, biases = _closed_form(mu, precision, factor)
    return GdaClassifier(
        weights=weights,
        biases=biases,
        prototypes=mu,
        precision=precision,
        provenance=provenance,
        fallback_classes=frozenset(empty),
    )


def fit_preliminary(
    set_: EmbeddingSet,
    bank: MemoryBank,
    prototypes: TextPrototypeSet | None = None,
    shrinkage: bool = True,
    self_consistent: bool = False,
) -> GdaClassifier:
    """Unweighted class means over the bootstrap banks + pooled shrunk covariance."""
    if bank.stage != STAGE_BOOTSTRAP:
        raise FitError(f"fit_preliminary expects a bootstrap bank, got {bank.stage!r}")
    return _fit(set_, bank, None, prototypes, "preliminary", shrinkage, self_consistent)


def vision_scores(classifier: GdaClassifier, set_: EmbeddingSet,
                  indices: np.ndarray) -> np.ndarray:
    """Softmax over classes of the classifier's logits for the given patches."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or int(idx.max()) >= set_.num_patches):
        raise FitError("patch index out of range")
    return softmax(classifier.patch_logits(set_.patches[idx]), axis=1)


def fit_final(
    set_: EmbeddingSet,
    bank: MemoryBank,
    q: np.ndarray,
    prototypes: TextPrototypeSet,
    q_indices: np.ndarray | None = None,
    self_consistent: bool = False,
) -> GdaClassifier:
    """Confidence-weighted prototypes + shrunk pooled covariance on the purified bank."""
    if bank.stage != STAGE_PURIFIED:
        raise FitError(f"fit_final expects a purified bank, got {bank.stage!r}")
    if bank.total() < 2:
        raise FitError("insufficient purified samples")
    q = np.asarray(q, dtype=np.float64)
    weights = [
        q[_q_rows(m, q.shape[0], q_indices), c] if len(m) else np.empty(0)
        for c, m in enumerate(bank.members)
    ]
    return _fit(set_, bank, weights, prototypes, "final", True, self_consistent)


def run_pvcl(
    set_: EmbeddingSet,
    prototypes: TextPrototypeSet,
    k: int = DEFAULT_K,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
    stage1_shrinkage: bool = True,
    self_consistent: bool = False,
    threads: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[GdaClassifier, FitReport]:
    """Full three-stage pipeline; deterministic given inputs and config.

    Stage-I scoring streams over the patch manifold in fixed chunks, keeping
    only the argmax class and entropy per patch, so memory stays flat on
    million-patch inputs.
    """
    t0 = time.monotonic()
    set_ = set_.without_labels()
    if set_.dim != prototypes.dim:
        raise FitError(
            f"dimension mismatch: embeddings d={set_.dim}, prototypes d={prototypes.dim}"
        )
    n = set_.num_patches
    proto_unit = unit_rows(prototypes.prototypes)
    argmax = np.empty(n, dtype=np.int64)
    ent = np.empty(n, dtype=np.float64)

    def stage1(sl: slice) -> None:
        p = softmax(logit_scale * (unit_rows(set_.patches[sl]) @ proto_unit.T), axis=1)
        argmax[sl] = p.argmax(axis=1)
        ent[sl] = entropy_rows(p)

    run_chunks(stage1, n, chunk=chunk, threads=threads)
    bank0 = _banks_from_argmax(argmax, ent, k, prototypes.num_classes)

    clf0 = fit_preliminary(set_, bank0, prototypes, shrinkage=stage1_shrinkage,
                           self_consistent=self_consistent)
    union = np.unique(np.concatenate([m for m in bank0.members if len(m)] or
                                     [np.empty(0, dtype=np.int64)]))
    q = vision_scores(clf0, set_, union)
    bank = purify_banks(bank0, q, q_indices=union)
    clf = fit_final(set_, bank, q, prototypes, q_indices=union,
                    self_consistent=self_consistent)
    report = FitReport(
        bootstrap_sizes=bank0.sizes(),
        purified_sizes=bank.sizes(),
        fallback_classes=tuple(sorted(clf.fallback_classes)),
        seconds=time.monotonic() - t0,
        k=k,
        logit_scale=logit_scale,
        num_patches=n,
    )
    return clf, report


# ---------------------------------------------------------------------------
# classifier container (same header as embedding files, magic "PIAC")


def write_classifier_file(clf: GdaClassifier, path, metadata: dict | None = None) -> None:
    md = dict(metadata or {})
    md["provenance"] = clf.provenance
    blob = json.dumps(md, sort_keys=True, separators=(",", ":")).encode("utf-8")
    c, d = clf.weights.shape
    fallback = np.zeros(c, dtype=np.uint8)
    if clf.fallback_classes:
        fallback[sorted(clf.fallback_classes)] = 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC_CLASSIFIER, VERSION, 0, d, c, 0, 0))
        fh.write(np.ascontiguousarray(clf.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(clf.biases, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(clf.prototypes, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(clf.precision, dtype="<f8").tobytes())
        fh.write(fallback.tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def read_classifier_file(path) -> tuple[GdaClassifier, dict]:
    with open(path, "rb") as fh:
        raw = _read_exact(fh, _HEADER.size, "header")
        magic, version, _flags, d, c, _, _ = _HEADER.unpack(raw)
        if magic != MAGIC_CLASSIFIER:
            raise StoreError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StoreError(f"unsupported version {version}")
        weights = np.frombuffer(_read_exact(fh, 8 * c * d, "weights"), dtype="<f8").reshape(c, d)
        biases = np.frombuffer(_read_exact(fh, 8 * c, "biases"), dtype="<f8")
        prototypes = np.frombuffer(_read_exact(fh, 8 * c * d, "prototypes"), dtype="<f8").reshape(c, d)
        precision = np.frombuffer(_read_exact(fh, 8 * d * d, "precision"), dtype="<f8").reshape(d, d)
        fallback = np.frombuffer(_read_exact(fh, c, "fallback bitmap"), dtype=np.uint8)
        (md_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        metadata = json.loads(_read_exact(fh, md_len, "metadata").decode("utf-8"))
        if fh.read(1):
            raise StoreError("trailing bytes after payload")
    clf = GdaClassifier(
        weights=weights,
        biases=biases,
        prototypes=prototypes,
        precision=precision,
        provenance=str(metadata.get("provenance", "final")),
        fallback_classes=frozenset(int(i) for i in np.flatnonzero(fallback)),
    )
    return clf, metadata
