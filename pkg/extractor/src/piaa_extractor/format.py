"""Standalone writer for the PIAA container format.

The byte format is the only contract between this tool and the inference
engine, so it is implemented here independently (little-endian):

    magic "PIAA" | u32 version=1 | u32 flags | u32 d | u32 C
    | u64 num_images | u64 M
    | u32 patch count per image
    | f32 patches (M x d, row-major) | f32 cls (num_images x d)
    | id table (flags bit1): u32 byte length + UTF-8 per image

Text-prototype files reuse the header with C > 0, num_images = M = 0,
followed by the C x d f32 matrix and the length-prefixed names table.
"""
from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

MAGIC = b"PIAA"
VERSION = 1
FLAG_IMAGE_IDS = 2

_HEADER = struct.Struct("<4sIIIIQQ")


def _names_blob(names: Sequence[str]) -> bytes:
    out = bytearray()
    for s in names:
        raw = s.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
    return bytes(out)


def write_embeddings(path, patch_counts: np.ndarray, patches: np.ndarray,
                     cls: np.ndarray, image_ids: Sequence[str]) -> None:
    counts = np.asarray(patch_counts, dtype="<u4")
    patches = np.ascontiguousarray(patches, dtype="<f4")
    cls = np.ascontiguousarray(cls, dtype="<f4")
    num_images = len(counts)
    total = int(counts.sum())
    if patches.shape != (total, patches.shape[1]) or cls.shape[0] != num_images:
        raise ValueError("inconsistent shapes for embedding file")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, FLAG_IMAGE_IDS, patches.shape[1], 0,
                              num_images, total))
        fh.write(counts.tobytes())
        fh.write(patches.tobytes())
        fh.write(cls.tobytes())
        fh.write(_names_blob(image_ids))


def write_prototypes(path, prototypes: np.ndarray, class_names: Sequence[str]) -> None:
    protos = np.ascontiguousarray(prototypes, dtype="<f4")
    if protos.shape[0] != len(class_names):
        raise ValueError("prototype rows do not match class names")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, protos.shape[1], protos.shape[0], 0, 0))
        fh.write(protos.tobytes())
        fh.write(_names_blob(class_names))
