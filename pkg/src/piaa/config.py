"""Pipeline hyperparameters and their digest.

Defaults: bank capacity K=512, fusion weight alpha=0.9, and a CLIP-style
logit scale of 100 for cosine softmax scoring.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

DEFAULT_K = 512
DEFAULT_ALPHA = 0.9
DEFAULT_LOGIT_SCALE = 100.0
DEFAULT_SECONDARY_TEMPERATURE = 1.0

K_SWEEP_GRID = (128, 256, 512, 1024, 1536)
ALPHA_SWEEP_GRID = tuple(round(0.1 * i, 1) for i in range(11))

MODES = ("full", "patch_only", "cls_only")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob that can change a fitted classifier or a score report."""

    k: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    logit_scale: float = DEFAULT_LOGIT_SCALE
    secondary_temperature: float = DEFAULT_SECONDARY_TEMPERATURE
    mode: str = "full"
    secondary_softmax: bool = True
    cls_via_gda: bool = False
    stage1_shrinkage: bool = True
    self_consistent_covariance: bool = False
    transductive: bool = False
    allow_empty_classes: bool = False
    normalize: bool = True
    threads: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"K must be positive, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.logit_scale < 0.0:
            raise ConfigError(f"logit_scale must be non-negative, got {self.logit_scale}")
        if self.secondary_temperature <= 0.0:
            raise ConfigError("secondary softmax temperature must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def digest(self) -> str:
        # threads is an execution resource, not a numerical parameter; results
        # are bit-identical for any thread count, so it stays out of the digest.
        params = dataclasses.asdict(self)
        params.pop("threads")
        return config_digest(params)


def config_digest(params: dict) -> str:
    """Stable 16-hex-digit hash of a parameter mapping (embedded in reports)."""
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
