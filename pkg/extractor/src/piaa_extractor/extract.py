"""Run an encoder over an image folder and emit PIAA embedding/prototype files."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import Encoder, create_encoder
from .format import write_embeddings, write_prototypes

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp")


class ExtractError(Exception):
    pass


@dataclass
class ExtractJob:
    image_root: Path
    class_names: Sequence[str]
    output_embeddings: Path
    output_prototypes: Path
    prompt_template: str = "a photo of a {}"
    ensemble_templates: Sequence[str] = ()   # extra templates; prototypes average over all
    encoder_id: str = "clip:openai/clip-vit-base-patch16"
    batch_size: int = 16
    skip_log: Path | None = None

    def templates(self) -> list[str]:
        return [self.prompt_template, *self.ensemble_templates]

    def resolved_skip_log(self) -> Path:
        if self.skip_log is not None:
            return Path(self.skip_log)
        return Path(str(self.output_embeddings) + ".skipped.jsonl")


@dataclass
class ExtractResult:
    num_images: int
    num_skipped: int
    files: list = field(default_factory=list)


def list_images(root: Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ExtractError(f"{root} is not a directory")
    paths = [p for p in sorted(root.rglob("*"))
             if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    return paths


def extract(job: ExtractJob, encoder: Encoder | None = None) -> ExtractResult:
    """Encode every decodable image under ``image_root`` plus one prototype per
    class; undecodable images are skipped with a warning and a sidecar record."""
    if len(job.class_names) == 0:
        raise ExtractError("at least one class name is required")
    enc = encoder if encoder is not None else create_encoder(job.encoder_id)
    paths = list_images(job.image_root)

    kept_ids: list[str] = []
    patch_blocks: list[np.ndarray] = []
    cls_rows: list[np.ndarray] = []
    skipped: list[dict] = []

    batch_imgs: list[Image.Image] = []
    batch_ids: list[str] = []

    def flush():
        if not batch_imgs:
            return
        patches, cls = enc.encode_images(batch_imgs)
        for row_patches, row_cls, img_id in zip(patches, cls, batch_ids):
            patch_blocks.append(np.asarray(row_patches, dtype=np.float32))
            cls_rows.append(np.asarray(row_cls, dtype=np.float32))
            kept_ids.append(img_id)
        batch_imgs.clear()
        batch_ids.clear()

    for path in paths:
        rel = str(path.relative_to(job.image_root))
        try:
            with Image.open(path) as img:
                img.load()
                batch_imgs.append(img.convert("RGB"))
            batch_ids.append(rel)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", rel, exc)
            skipped.append({"path": rel, "error": str(exc)})
            continue
        if len(batch_imgs) >= job.batch_size:
            flush()
    flush()

    if not kept_ids:
        raise ExtractError(f"no usable images under {job.image_root}")

    counts = np.array([len(b) for b in patch_blocks], dtype=np.int64)
    all_patches = np.concatenate(patch_blocks, axis=0)
    all_cls = np.stack(cls_rows, axis=0)

    templates = job.templates()
    prompts = [t.format(name) for name in job.class_names for t in templates]
    per_prompt = enc.encode_texts(prompts).reshape(len(job.class_names), len(templates), -1)
    prototypes = per_prompt.astype(np.float64).mean(axis=1)
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    prototypes = prototypes.astype(np.float32)

    out_emb = Path(job.output_embeddings)
    out_emb.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out_emb, counts, all_patches, all_cls, kept_ids)
    out_proto = Path(job.output_prototypes)
    out_proto.parent.mkdir(parents=True, exist_ok=True)
    write_prototypes(out_proto, prototypes, list(job.class_names))

    files = [out_emb, out_proto]
    skip_log = job.resolved_skip_log()
    if skipped:
        with open(skip_log, "w") as fh:
            for rec in skipped:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        files.append(skip_log)

    log.info("encoded %d images (%d skipped) -> %s", len(kept_ids), len(skipped), out_emb)
    return ExtractResult(num_images=len(kept_ids), num_skipped=len(skipped), files=files)
