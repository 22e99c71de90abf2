"""mgtlab: a benchmark harness for machine-generated-text detection.

Pipeline stages, each its own module:

- corpus     ingestion, moderation, prompts, seeded splits
- scorer     token-level scoring backends (reference unigram, HTTP service)
- detectors  zero-shot detection statistics over token scores
- decision   threshold calibration and shallow linear classifiers
- neural     hashing-encoder MLP reference classifier
- continual  class-incremental update techniques over that classifier
- bench      experiment protocols and deterministic reports
- cli        command-line front end (`mgtlab ...`)
"""

__version__ = "0.1.0"

from .util import ContractError, DataError, UsageError, derive_seed
from .corpus import Document, ModerationPolicy, read_jsonl, split_train_test
from .scorer import UnigramBackend, fit_reference_unigram, external_backend
from .detectors import DETECTORS, score_text
from .decision import ThresholdRule, calibrate_threshold, apply_threshold
from .neural import TrainConfig, train_supervised
from .continual import TECHNIQUES, cil_update
from .bench import (BenchConfig, EvalReport, TransferMatrix, REGISTRY,
                    run_in_distribution, run_transfer, run_few_shot, run_cil,
                    emit_report, load_report)

__all__ = [
    "ContractError", "DataError", "UsageError", "derive_seed",
    "Document", "ModerationPolicy", "read_jsonl", "split_train_test",
    "UnigramBackend", "fit_reference_unigram", "external_backend",
    "DETECTORS", "score_text",
    "ThresholdRule", "calibrate_threshold", "apply_threshold",
    "TrainConfig", "train_supervised",
    "TECHNIQUES", "cil_update",
    "BenchConfig", "EvalReport", "TransferMatrix", "REGISTRY",
    "run_in_distribution", "run_transfer", "run_few_shot", "run_cil",
    "emit_report", "load_report",
    "__version__",
]
