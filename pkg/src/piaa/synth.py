"""Deterministic synthetic patch manifolds and independent brute-force oracles.

Patch features are drawn from class-conditional Gaussians with a shared
covariance, so the exact Bayes classifier is known in closed form and every
pipeline stage can be verified at desk scale without an encoder. Text
prototypes are the true class means pushed through a controllable "modality
gap": a rotation by a fixed angle toward a per-class random direction plus
a constant offset along a shared direction.

Randomness is fully reproducible: every consumer gets its own Philox
counter-based generator keyed as (seed, stream << 48 | index), with one
stream per image (class choice, patch noise, cls noise, in that order), one
for prototype directions, and one for the mean constructor. Gaussians come
from an explicit Box-Muller transform of the generator's uniforms, so the
fixtures are portable across platforms and numpy versions.

The oracles (oracle_gda, oracle_ap) are literal transcriptions of the
closed forms, sharing no linear-algebra helpers with the production code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .pvcl import GdaClassifier
from .store import EmbeddingSet, TextPrototypeSet, make_embedding_set, make_text_prototypes

STREAM_IMAGE = 0
STREAM_PROTO = 1
STREAM_MEANS = 2

_ORACLE_TRACE_FLOOR = 1e-12


def _gen(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (stream << 48) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _standard_normals(gen: np.random.Generator, n: int) -> np.ndarray:
    """Box-Muller transform of uniform draws; deterministic given the stream."""
    m = (n + 1) // 2
    u1 = 1.0 - gen.random(m)          # (0, 1] keeps the log finite
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    """Everything that determines a generated manifold (seed included)."""

    num_classes: int
    dim: int
    images: int
    patches_per_image: int
    true_means: np.ndarray            # (C, d)
    shared_cov: np.ndarray            # (d, d) SPD
    prototype_rotation_deg: float = 0.0
    prototype_offset: float = 0.0
    small_object_classes: tuple[int, ...] = ()
    small_object_fraction: float = 0.1
    max_classes_per_image: int = 3
    cls_noise: float = 0.0
    normalize: bool = False
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def names(self) -> tuple[str, ...]:
        if self.class_names:
            return self.class_names
        return tuple(f"class{c:02d}" for c in range(self.num_classes))


@dataclass(frozen=True, eq=False)
class SynthData:
    """Generator output. ``patch_classes`` is test-only ground truth (the
    class each patch was sampled from); fitting code never sees it."""

    embeddings: EmbeddingSet
    prototypes: TextPrototypeSet
    ground_truth: GdaClassifier
    patch_classes: np.ndarray


def make_spec(
    num_classes: int,
    dim: int,
    images: int,
    patches_per_image: int,
    mean_scale: float = 1.0,
    cov_scale: float = 0.01,
    rotation_deg: float = 0.0,
    offset: float = 0.0,
    small_object_classes: tuple[int, ...] = (),
    small_object_fraction: float = 0.1,
    max_classes_per_image: int = 3,
    cls_noise: float = 0.0,
    normalize: bool = False,
    seed: int = 0,
) -> SynthSpec:
    """Spec with seeded orthonormal class means (scaled) and isotropic covariance.

    Orthonormal means put every pair at distance mean_scale * sqrt(2), so the
    6-sigma separation condition is mean_scale * sqrt(2) >= 6 * sqrt(cov_scale).
    Requires num_classes <= dim.
    """
    if num_classes > dim:
        raise ConfigError("orthonormal means need num_classes <= dim")
    g = _gen(seed, STREAM_MEANS)
    a = _standard_normals(g, dim * num_classes).reshape(dim, num_classes)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    means = mean_scale * q.T
    return SynthSpec(
        num_classes=num_classes,
        dim=dim,
        images=images,
        patches_per_image=patches_per_image,
        true_means=means,
        shared_cov=cov_scale * np.eye(dim),
        prototype_rotation_deg=rotation_deg,
        prototype_offset=offset,
        small_object_classes=tuple(small_object_classes),
        small_object_fraction=small_object_fraction,
        max_classes_per_image=max_classes_per_image,
        cls_noise=cls_noise,
        normalize=normalize,
        seed=seed,
    )


def _gapped_prototypes(spec: SynthSpec) -> np.ndarray:
    """Rotate each unit mean by the gap angle toward a per-class random
    direction drawn from the span of the class means (so the gap actually
    confuses classes instead of wasting cosine on unused dimensions), then
    add the shared offset and renormalize."""
    g = _gen(spec.seed, STREAM_PROTO)
    d = spec.dim
    u0 = _unit(_standard_normals(g, d))
    theta = math.radians(spec.prototype_rotation_deg)
    unit_means = np.stack([_unit(m.astype(np.float64)) for m in spec.true_means])
    protos = np.empty((spec.num_classes, d))
    for c in range(spec.num_classes):
        mu_hat = unit_means[c]
        coeff = _standard_normals(g, spec.num_classes)
        v = coeff @ unit_means if spec.num_classes > 1 else _standard_normals(g, d)
        v = v - (v @ mu_hat) * mu_hat
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            v = _standard_normals(g, d)
            v = v - (v @ mu_hat) * mu_hat
            norm = np.linalg.norm(v)
        v_hat = v / norm
        w = math.cos(theta) * mu_hat + math.sin(theta) * v_hat
        w = w + spec.prototype_offset * u0
        protos[c] = _unit(w)
    return protos


def _allocate_patches(present: np.ndarray, m: int, spec: SynthSpec) -> np.ndarray:
    """Patch counts per present class; small-footprint classes get at most
    max(1, floor(fraction * m)) patches, the rest share the remainder."""
    small = np.array([c in spec.small_object_classes for c in present])
    counts = np.zeros(len(present), dtype=np.int64)
    cap = max(1, int(spec.small_object_fraction * m))
    counts[small] = cap
    if counts.sum() > m:                     # cap cannot fit; one patch each
        counts[small] = 1
    big = np.flatnonzero(~small)
    if len(big) == 0:
        big = np.arange(len(present))        # degenerate: only small classes present
    rest = m - int(counts.sum())
    if rest < 0:
        raise ConfigError("patches_per_image too small for the classes per image")
    base, extra = divmod(rest, len(big))
    counts[big] += base
    counts[big[:extra]] += 1
    return counts


def generate(spec: SynthSpec) -> SynthData:
    """Sample the manifold, labels, [CLS] vectors, gapped prototypes, and the
    exact Bayes linear classifier (closed form with the true mean/covariance)."""
    means = np.asarray(spec.true_means, dtype=np.float64)
    cov = np.asarray(spec.shared_cov, dtype=np.float64)
    if means.shape != (spec.num_classes, spec.dim):
        raise ConfigError(f"true_means shape {means.shape} invalid")
    if not np.allclose(cov, cov.T):
        raise ConfigError("covariance is not symmetric positive-definite")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("covariance is not symmetric positive-definite") from exc

    non_small = [c for c in range(spec.num_classes) if c not in spec.small_object_classes]
    m = spec.patches_per_image
    # float32 buffers: that is the storage dtype, and it keeps million-patch
    # manifolds at VOC scale within a few GB
    all_patches = np.empty((spec.images * m, spec.dim), dtype=np.float32)
    all_cls = np.empty((spec.images, spec.dim), dtype=np.float32)
    labels = np.zeros((spec.images, spec.num_classes), dtype=np.uint8)
    patch_classes = np.empty(spec.images * m, dtype=np.int64)

    for i in range(spec.images):
        g = _gen(spec.seed, STREAM_IMAGE, i)
        n_present = 1 + int(g.integers(min(spec.max_classes_per_image, spec.num_classes)))
        pool = non_small if non_small else list(range(spec.num_classes))
        first = pool[int(g.integers(len(pool)))]
        others = np.array([c for c in range(spec.num_classes) if c != first])
        extra = g.permutation(others)[: n_present - 1]
        present = np.sort(np.concatenate([[first], extra]).astype(np.int64))
        counts = _allocate_patches(present, m, spec)
        keep = counts > 0
        present, counts = present[keep], counts[keep]
        assignment = np.repeat(present, counts)[g.permutation(m)]
        z = _standard_normals(g, m * spec.dim).reshape(m, spec.dim)
        x = means[assignment] + z @ chol.T
        cls_vec = x.mean(axis=0)
        if spec.cls_noise > 0.0:
            cls_vec = cls_vec + spec.cls_noise * _standard_normals(g, spec.dim)
        all_patches[i * m : (i + 1) * m] = x
        all_cls[i] = _unit(cls_vec)
        labels[i, present] = 1
        patch_classes[i * m : (i + 1) * m] = assignment

    embeddings = make_embedding_set(
        np.full(spec.images, m, dtype=np.int64),
        all_patches, all_cls, labels=labels, normalize=spec.normalize,
    )
    prototypes = make_text_prototypes(_gapped_prototypes(spec), spec.names())
    sigma_inv = np.linalg.inv(cov)
    sigma_inv = (sigma_inv + sigma_inv.T) / 2.0
    weights = means @ sigma_inv
    biases = -0.5 * np.einsum("cd,cd->c", means, weights)
    truth = GdaClassifier(
        weights=weights, biases=biases, prototypes=means, precision=sigma_inv,
        provenance="final", fallback_classes=frozenset(),
    )
    return SynthData(embeddings=embeddings, prototypes=prototypes,
                     ground_truth=truth, patch_classes=patch_classes)


# ---------------------------------------------------------------------------
# independent oracles (literal transcriptions, no shared helpers)


def oracle_gda(features: np.ndarray, hard_labels: np.ndarray,
               weights: np.ndarray | None = None,
               num_classes: int | None = None) -> GdaClassifier:
    """Reference closed-form fit from hard labels (optionally confidence-weighted).

    Means, pooled covariance, trace-regularized inverse and the linear
    weights are written out directly with np.linalg.inv; degenerate scatter
    uses the same floor rule as the production fit.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(hard_labels, dtype=np.int64)
    n, d = x.shape
    c_total = int(y.max()) + 1 if num_classes is None else num_classes
    mu = np.zeros((c_total, d))
    for c in range(c_total):
        mask = y == c
        if not mask.any():
            continue
        if weights is None:
            mu[c] = x[mask].mean(axis=0)
        else:
            w = np.asarray(weights, dtype=np.float64)[mask]
            mu[c] = (w[:, None] * x[mask]).sum(axis=0) / w.sum()
    sigma = np.zeros((d, d))
    for c in range(c_total):
        mask = y == c
        if not mask.any():
            continue
        dev = x[mask] - mu[c]
        sigma += dev.T @ dev
    sigma /= n
    trace = float(np.trace(sigma))
    if trace < _ORACLE_TRACE_FLOOR:
        precision = (d / _ORACLE_TRACE_FLOOR) * np.eye(d)
    else:
        precision = d * np.linalg.inv((n - 1) * sigma + trace * np.eye(d))
        precision = (precision + precision.T) / 2.0
    w_mat = mu @ precision.T
    b = -0.5 * np.array([mu[c] @ precision @ mu[c] for c in range(c_total)])
    return GdaClassifier(weights=w_mat, biases=b, prototypes=mu, precision=precision,
                         provenance="final", fallback_classes=frozenset())


def oracle_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(N^2) pairwise average precision (ties by ascending original index)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n = len(s)
    num_pos = int(y.sum())
    if num_pos == 0:
        return float("nan")
    idx = np.arange(n)
    above = (s[None, :] > s[:, None]) | ((s[None, :] == s[:, None]) & (idx[None, :] < idx[:, None]))
    rank = 1 + above.sum(axis=1)
    hits = 1 + (above & y[None, :]).sum(axis=1)
    return math.fsum((hits[y] / rank[y]).tolist()) / num_pos


def patch_argmax_accuracy(scorer, patches: np.ndarray, patch_classes: np.ndarray) -> float:
    """Fraction of patches whose argmax logit matches the generating class."""
    logits = scorer.patch_logits(np.asarray(patches, dtype=np.float64))
    return float((logits.argmax(axis=1) == np.asarray(patch_classes)).mean())


# ---------------------------------------------------------------------------
# key = value spec files


_SPEC_KEYS = {
    "num_classes": int, "dim": int, "images": int, "patches_per_image": int,
    "mean_scale": float, "cov_scale": float, "rotation_deg": float,
    "offset": float, "small_object_fraction": float,
    "max_classes_per_image": int, "cls_noise": float, "seed": int,
}


def load_spec(path) -> SynthSpec:
    """Parse a small key = value text file into a spec (via make_spec)."""
    kwargs: dict = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "normalize":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif key == "small_object_classes":
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key in _SPEC_KEYS:
                kwargs[key] = _SPEC_KEYS[key](value)
            else:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
    required = ("num_classes", "dim", "images", "patches_per_image")
    missing = [k for k in required if k not in kwargs]
    if missing:
        raise ConfigError(f"spec file missing keys: {', '.join(missing)}")
    return make_spec(**kwargs)
