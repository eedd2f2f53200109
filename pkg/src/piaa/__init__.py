"""Training-free multi-label inference from patch embeddings.

Fit a closed-form linear visual classifier from an unlabeled patch manifold
(entropy-guided bank bootstrapping, statistical purification, shrunk
Gaussian-discriminant estimation), aggregate patch evidence into image-level
multi-label scores, and evaluate with ranking metrics.
"""

from .config import PipelineConfig
from .errors import ConfigError, EvalError, FitError, PiaaError, StoreError
from .evaluation import EvalResult, average_precision, evaluate
from .paa import ImageScores, ScoreReport, TextScorer, fuse, infer_image, score_images
from .pvcl import (
    GdaClassifier,
    MemoryBank,
    bootstrap_banks,
    fit_final,
    fit_preliminary,
    purify_banks,
    read_classifier_file,
    run_pvcl,
    vision_scores,
    write_classifier_file,
)
from .store import (
    EmbeddingSet,
    TextPrototypeSet,
    make_embedding_set,
    make_text_prototypes,
    read_embedding_file,
    read_text_prototypes,
    write_embedding_file,
    write_text_prototypes,
)
from .zeroshot import predictive_entropy, text_align_probs

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "EvalError", "FitError", "PiaaError", "StoreError",
    "PipelineConfig",
    "EmbeddingSet", "TextPrototypeSet",
    "make_embedding_set", "make_text_prototypes",
    "read_embedding_file", "write_embedding_file",
    "read_text_prototypes", "write_text_prototypes",
    "text_align_probs", "predictive_entropy",
    "MemoryBank", "GdaClassifier",
    "bootstrap_banks", "fit_preliminary", "vision_scores", "purify_banks",
    "fit_final", "run_pvcl", "read_classifier_file", "write_classifier_file",
    "TextScorer", "ImageScores", "ScoreReport",
    "fuse", "infer_image", "score_images",
    "EvalResult", "average_precision", "evaluate",
    "__version__",
]
