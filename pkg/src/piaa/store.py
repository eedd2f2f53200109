"""On-disk embedding container and the in-memory sets every stage consumes.

File layout (little-endian throughout)::

    header   magic "PIAA" | u32 version=1 | u32 flags | u32 d | u32 C
             | u64 num_images | u64 M
    body     u32 patch_count per image
             f32 patches, row-major, M x d
             f32 cls, row-major, num_images x d
             u8  labels, num_images x C            (flags bit0)
             id table: u32 byte length + UTF-8     (flags bit1, one per image)

Text-prototype files reuse the header with C > 0 and num_images = M = 0,
followed by the C x d f32 prototype matrix and a length-prefixed UTF-8
names table.

Stored vectors are float32; everything downstream converts to float64
before accumulating. Ingestion L2-normalizes rows whose norm deviates from
1 by more than NORM_TOL, which makes normalization idempotent and the
write/read cycle bit-exact for already-normalized data.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import StoreError

MAGIC_EMBEDDING = b"PIAA"
VERSION = 1
FLAG_LABELS = 1       # bit0: labels section present
FLAG_IMAGE_IDS = 2    # bit1: image-id table present

NORM_TOL = 1e-4       # rows within this of unit norm are left untouched
ZERO_NORM_FLOOR = 1e-12

_HEADER = struct.Struct("<4sIIIIQQ")


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Patch and [CLS] embeddings for a collection of images.

    ``patch_offsets[i] = (start, count)`` delimits image i's rows in
    ``patches``; the offsets partition [0, M) exactly. ``labels`` is an
    optional num_images x C binary matrix used only by evaluation — fitting
    and inference code receives label-free views (see ``without_labels``).
    """

    dim: int
    patch_offsets: np.ndarray       # (num_images, 2) int64: start, count
    patches: np.ndarray             # (M, dim) float32
    cls: np.ndarray                 # (num_images, dim) float32
    image_ids: tuple[str, ...]
    labels: np.ndarray | None = None  # (num_images, C) uint8

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    def image_patches(self, i: int) -> np.ndarray:
        start, count = self.patch_offsets[i]
        return self.patches[start : start + count]

    def patch_counts(self) -> np.ndarray:
        return self.patch_offsets[:, 1].copy()

    def without_labels(self) -> "EmbeddingSet":
        """Label-free view handed to fitting/inference code."""
        if self.labels is None:
            return self
        return dataclasses.replace(self, labels=None)


@dataclass(frozen=True, eq=False)
class TextPrototypeSet:
    """Unit-norm text-derived class prototypes used for zero-shot scoring."""

    dim: int
    prototypes: np.ndarray          # (C, dim) float32
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def default_image_ids(n: int) -> tuple[str, ...]:
    return tuple(f"{i:08d}" for i in range(n))


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    """Ingestion normalization: float32 rows with L2 norm within NORM_TOL of 1.

    Rows already inside the tolerance are returned bit-unchanged (idempotent);
    others are rescaled in float64 and cast back. Zero rows are rejected.
    """
    out = np.ascontiguousarray(rows, dtype=np.float32)
    if out.size == 0:
        return out
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    if np.any(norms < ZERO_NORM_FLOOR):
        bad = int(np.argmax(norms < ZERO_NORM_FLOOR))
        raise StoreError(f"zero-norm vector at row {bad}")
    fix = np.abs(norms - 1.0) > NORM_TOL
    if np.any(fix):
        out = out.copy()
        out[fix] = (out[fix].astype(np.float64) / norms[fix, None]).astype(np.float32)
    return out


def make_embedding_set(
    patch_counts: Sequence[int] | np.ndarray,
    patches: np.ndarray,
    cls: np.ndarray,
    image_ids: Sequence[str] | None = None,
    labels: np.ndarray | None = None,
    normalize: bool = True,
) -> EmbeddingSet:
    """Validate raw arrays and assemble an EmbeddingSet.

    ``normalize=False`` skips ingestion normalization (ablation knob); all
    structural invariants are still enforced.
    """
    counts = np.asarray(patch_counts, dtype=np.int64)
    patches = np.ascontiguousarray(patches, dtype=np.float32)
    cls = np.ascontiguousarray(cls, dtype=np.float32)
    if patches.ndim != 2 or cls.ndim != 2:
        raise StoreError("patches and cls must be 2-D arrays")
    dim = patches.shape[1]
    if dim < 1:
        raise StoreError("embedding dimension must be positive")
    if cls.shape != (len(counts), dim):
        raise StoreError(
            f"cls shape {cls.shape} does not match ({len(counts)}, {dim})"
        )
    if np.any(counts < 0):
        raise StoreError("negative patch count")
    if int(counts.sum()) != patches.shape[0]:
        raise StoreError(
            f"patch counts sum to {int(counts.sum())} but {patches.shape[0]} rows given"
        )
    if len(counts):
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    else:
        starts = np.zeros(0, dtype=np.int64)
    offsets = np.stack([starts, counts], axis=1) if len(counts) else np.zeros((0, 2), dtype=np.int64)

    if image_ids is None:
        ids = default_image_ids(len(counts))
    else:
        if len(image_ids) != len(counts):
            raise StoreError("image_ids length does not match number of images")
        ids = tuple(str(s) for s in image_ids)

    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if labels.ndim != 2 or labels.shape[0] != len(counts):
            raise StoreError(f"labels shape {labels.shape} invalid")
        if labels.shape[1] < 1:
            raise StoreError("labels must have at least one class column")
        if not np.all((labels == 0) | (labels == 1)):
            raise StoreError("labels must contain only 0 or 1")

    if normalize:
        patches = normalize_rows(patches)
        cls = normalize_rows(cls)

    return EmbeddingSet(
        dim=dim,
        patch_offsets=offsets,
        patches=patches,
        cls=cls,
        image_ids=ids,
        labels=labels,
    )


def make_text_prototypes(
    prototypes: np.ndarray,
    class_names: Sequence[str],
    normalize: bool = True,
) -> TextPrototypeSet:
    prototypes = np.ascontiguousarray(prototypes, dtype=np.float32)
    if prototypes.ndim != 2 or prototypes.shape[0] != len(class_names):
        raise StoreError(
            f"prototype matrix shape {prototypes.shape} does not match "
            f"{len(class_names)} class names"
        )
    if prototypes.shape[0] < 1 or prototypes.shape[1] < 1:
        raise StoreError("prototype matrix must be non-empty")
    names = tuple(str(s) for s in class_names)
    if len(set(names)) != len(names):
        raise StoreError("duplicate class names")
    if normalize:
        prototypes = normalize_rows(prototypes)
    return TextPrototypeSet(dim=prototypes.shape[1], prototypes=prototypes, class_names=names)


# ---------------------------------------------------------------------------
# serialization


def _write_ids(fh: BinaryIO, ids: Sequence[str]) -> None:
    for s in ids:
        raw = s.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StoreError(f"truncated payload while reading {what}")
    return buf


def _read_ids(fh: BinaryIO, n: int, what: str) -> tuple[str, ...]:
    out = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", _read_exact(fh, 4, what))
        out.append(_read_exact(fh, ln, what).decode("utf-8"))
    return tuple(out)


def write_embedding_file(es: EmbeddingSet, path) -> None:
    flags = 0
    num_classes = 0
    if es.labels is not None:
        flags |= FLAG_LABELS
        num_classes = es.labels.shape[1]
    custom_ids = es.image_ids != default_image_ids(es.num_images)
    if custom_ids:
        flags |= FLAG_IMAGE_IDS
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC_EMBEDDING, VERSION, flags, es.dim, num_classes,
                es.num_images, es.num_patches,
            )
        )
        fh.write(np.ascontiguousarray(es.patch_offsets[:, 1], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(es.patches, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(es.cls, dtype="<f4").tobytes())
        if es.labels is not None:
            fh.write(np.ascontiguousarray(es.labels, dtype=np.uint8).tobytes())
        if custom_ids:
            _write_ids(fh, es.image_ids)


def _read_header(fh: BinaryIO):
    raw = _read_exact(fh, _HEADER.size, "header")
    magic, version, flags, dim, num_classes, num_images, num_patches = _HEADER.unpack(raw)
    if magic != MAGIC_EMBEDDING:
        raise StoreError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"unsupported version {version}")
    return flags, dim, num_classes, num_images, num_patches


def read_embedding_file(path, normalize: bool = True) -> EmbeddingSet:
    with open(path, "rb") as fh:
        flags, dim, num_classes, num_images, num_patches = _read_header(fh)
        if num_images == 0 and num_patches == 0 and num_classes > 0 and not flags & FLAG_LABELS:
            raise StoreError("not an embedding file (text-prototype layout)")
        if dim < 1:
            raise StoreError("embedding dimension must be positive")
        counts = np.frombuffer(
            _read_exact(fh, 4 * num_images, "patch counts"), dtype="<u4"
        ).astype(np.int64)
        if int(counts.sum()) != num_patches:
            raise StoreError("patch counts do not sum to the patch total")
        patches = np.frombuffer(
            _read_exact(fh, 4 * num_patches * dim, "patches"), dtype="<f4"
        ).reshape(num_patches, dim)
        cls = np.frombuffer(
            _read_exact(fh, 4 * num_images * dim, "cls"), dtype="<f4"
        ).reshape(num_images, dim)
        labels = None
        if flags & FLAG_LABELS:
            if num_classes < 1:
                raise StoreError("labels flag set but class count is zero")
            labels = np.frombuffer(
                _read_exact(fh, num_images * num_classes, "labels"), dtype=np.uint8
            ).reshape(num_images, num_classes)
        ids = None
        if flags & FLAG_IMAGE_IDS:
            ids = _read_ids(fh, num_images, "image ids")
        if fh.read(1):
            raise StoreError("trailing bytes after payload")
    return make_embedding_set(counts, patches, cls, image_ids=ids, labels=labels,
                              normalize=normalize)


def write_text_prototypes(tp: TextPrototypeSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC_EMBEDDING, VERSION, 0, tp.dim, tp.num_classes, 0, 0))
        fh.write(np.ascontiguousarray(tp.prototypes, dtype="<f4").tobytes())
        _write_ids(fh, tp.class_names)


def read_text_prototypes(path) -> TextPrototypeSet:
    with open(path, "rb") as fh:
        flags, dim, num_classes, num_images, num_patches = _read_header(fh)
        if num_images != 0 or num_patches != 0 or flags != 0 or num_classes == 0:
            raise StoreError("not a text-prototype file")
        protos = np.frombuffer(
            _read_exact(fh, 4 * num_classes * dim, "prototypes"), dtype="<f4"
        ).reshape(num_classes, dim)
        names = _read_ids(fh, num_classes, "class names")
        if fh.read(1):
            raise StoreError("trailing bytes after payload")
    return make_text_prototypes(protos, names)
