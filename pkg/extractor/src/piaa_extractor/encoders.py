"""Encoders: a frozen CLIP backbone (optional dependency) and a deterministic
stub for tests.

Both produce unit-norm float32 patch-token and [CLS] embeddings at a 16-px
patch grid on 224x224 inputs (196 patches per image), plus one text embedding
per class prompt.

The CLIP path takes the final transformer block's patch tokens after the
post-layernorm and visual projection; whether the reference pipelines use the
penultimate block instead is undocumented, so the final block is the
assumption here.
"""
from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 224
PATCH_SIZE = 16
GRID = IMAGE_SIZE // PATCH_SIZE          # 14 -> 196 patches


class Encoder(Protocol):
    dim: int
    patches_per_image: int

    def encode_images(self, images: Sequence[Image.Image]) -> tuple[np.ndarray, np.ndarray]:
        """Returns (patches [B, P, d], cls [B, d]), unit-norm float32."""
        ...

    def encode_texts(self, prompts: Sequence[str]) -> np.ndarray:
        """Returns unit-norm float32 [C, d]."""
        ...


def _unit(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return (rows / np.where(norms == 0.0, 1.0, norms)).astype(np.float32)


class ToyEncoder:
    """Deterministic stand-in: seeded random projection of per-cell pixel
    statistics. No weights, no network; identical images give identical rows."""

    _STATS = 8

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.patches_per_image = GRID * GRID
        gen = np.random.Generator(np.random.Philox(key=np.array([0x70_79, dim],
                                                                dtype=np.uint64)))
        self._proj = gen.normal(size=(self._STATS, dim))

    def _cell_stats(self, image: Image.Image) -> np.ndarray:
        rgb = image.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        a = np.asarray(rgb, dtype=np.float64) / 255.0
        cells = a.reshape(GRID, PATCH_SIZE, GRID, PATCH_SIZE, 3).transpose(0, 2, 1, 3, 4)
        cells = cells.reshape(self.patches_per_image, PATCH_SIZE * PATCH_SIZE, 3)
        mean = cells.mean(axis=1)
        std = cells.std(axis=1)
        lum = cells.mean(axis=(1, 2), keepdims=False)[:, None]
        rng_feat = (cells.max(axis=1) - cells.min(axis=1)).mean(axis=1)[:, None]
        return np.concatenate([mean, std, lum, rng_feat], axis=1)

    def encode_images(self, images):
        patches = np.stack([_unit(self._cell_stats(img) @ self._proj) for img in images])
        cls = _unit(patches.astype(np.float64).mean(axis=1))
        return patches.astype(np.float32), cls

    def encode_texts(self, prompts):
        rows = []
        for prompt in prompts:
            seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8],
                                  "little")
            gen = np.random.Generator(np.random.Philox(key=np.array([seed, self.dim],
                                                                    dtype=np.uint64)))
            rows.append(gen.normal(size=self.dim))
        return _unit(np.stack(rows))


class ClipEncoder:
    """Frozen CLIP via transformers. Patch tokens come from the final block,
    post-layernormed and pushed through the visual projection; the [CLS]
    embedding is the model's pooled image feature."""

    def __init__(self, model_id: str = "openai/clip-vit-base-patch16",
                 device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - exercised without extras
            raise ImportError(
                "the CLIP encoder needs the [clip] extra: pip install 'piaa-extractor[clip]'"
            ) from exc
        self._torch = torch
        self.device = device
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.dim = self.model.config.projection_dim
        patch = self.model.config.vision_config.patch_size
        size = self.model.config.vision_config.image_size
        self.patches_per_image = (size // patch) ** 2

    def encode_images(self, images):
        torch = self._torch
        inputs = self.processor(images=list(images), return_tensors="pt").to(self.device)
        with torch.no_grad():
            vision = self.model.vision_model(pixel_values=inputs["pixel_values"])
            tokens = vision.last_hidden_state[:, 1:, :]
            tokens = self.model.vision_model.post_layernorm(tokens)
            patches = self.model.visual_projection(tokens)
            cls = self.model.get_image_features(pixel_values=inputs["pixel_values"])
        patches = patches / patches.norm(dim=-1, keepdim=True)
        cls = cls / cls.norm(dim=-1, keepdim=True)
        return (patches.cpu().numpy().astype(np.float32),
                cls.cpu().numpy().astype(np.float32))

    def encode_texts(self, prompts):
        torch = self._torch
        inputs = self.processor(text=list(prompts), return_tensors="pt",
                                padding=True).to(self.device)
        with torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)


def create_encoder(encoder_id: str) -> Encoder:
    """"toy[:dim]" for the deterministic stub, anything else is a CLIP model id
    (optionally prefixed "clip:")."""
    if encoder_id == "toy" or encoder_id.startswith("toy:"):
        dim = int(encoder_id.split(":", 1)[1]) if ":" in encoder_id else 64
        return ToyEncoder(dim=dim)
    model_id = encoder_id.split(":", 1)[1] if encoder_id.startswith("clip:") else encoder_id
    return ClipEncoder(model_id=model_id)
