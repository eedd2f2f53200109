"""Text-alignment scoring and predictive entropy (the Stage-I signals).

A patch is scored against every class prototype by cosine similarity,
scaled and softmax-normalized into a row-stochastic matrix; the entropy of
that row measures how committed the text side is about the patch.
"""
from __future__ import annotations

import numpy as np

from .config import DEFAULT_LOGIT_SCALE
from .numerics import check_prob_matrix, entropy_rows, softmax, unit_rows
from .store import TextPrototypeSet


def text_align_probs(
    patches: np.ndarray,
    prototypes: TextPrototypeSet,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> np.ndarray:
    """Row-stochastic N x C matrix: softmax(logit_scale * cos(x_i, w_c)).

    Cosine similarity is computed on float64 unit directions, so the result
    is invariant to any positive rescaling of the patch vectors. With
    logit_scale == 0 every row is uniform.
    """
    if logit_scale < 0.0:
        raise ValueError(f"logit_scale must be non-negative, got {logit_scale}")
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != prototypes.dim:
        raise ValueError(
            f"dimension mismatch: patches {x.shape} vs prototypes dim {prototypes.dim}"
        )
    cos = unit_rows(x) @ unit_rows(prototypes.prototypes).T
    return softmax(logit_scale * cos, axis=1)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy in nats; values lie in [0, ln C]."""
    p = check_prob_matrix(probs)
    return entropy_rows(p)
