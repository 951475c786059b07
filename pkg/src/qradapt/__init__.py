"""Low-rank adapters on a frozen pivoted-QR basis, plus a desk-scale test rig.

The library splits into a numerical core (``linalg``, ``rank``, ``adapters``)
and an experiment harness (``model``, ``tasks``, ``train``, ``config``,
``cli``).  ``matio`` and ``checkpoint`` define the on-disk formats.
"""

from .adapters import (
    FULL_FT,
    LORA,
    METHODS,
    PROJECTIONS,
    QR_LORA,
    SVD_LORA,
    AdapterSpec,
    FullFtAdapter,
    LoraAdapter,
    ModelDims,
    QrLoraAdapter,
    SvdLoraAdapter,
    build_adapter,
    build_full_ft_adapter,
    build_lora_adapter,
    build_qr_adapter,
    build_svd_lora_adapter,
    count_trainable,
)
from .checkpoint import CheckpointFormatError, load_adapter, load_model, save_adapter, save_model
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .linalg import ConvergenceError, PivotedQR, ThinSVD, qr_pivoted, reconstruct, svd
from .matio import MatrixFormatError, load_matrix, load_matrix_any, load_matrix_csv, save_matrix
from .model import TinyTransformer, TinyTransformerConfig
from .rank import RankPolicy, select_rank
from .tasks import BAG_SEPARABLE, KINDS, PAIR_ENTAIL, PATTERN_MATCH, SyntheticTask, TaskData, generate
from .train import (
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    macro_f1,
    records_to_csv,
    records_to_jsonl,
    run_experiment,
    sweep_scope,
    sweep_size,
    sweep_tau,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec", "BAG_SEPARABLE", "CheckpointFormatError", "ConfigError", "ConvergenceError",
    "ExperimentConfig", "FULL_FT", "FullFtAdapter", "KINDS", "LORA", "LoraAdapter", "METHODS",
    "MatrixFormatError", "MetricsRecord", "ModelDims", "PAIR_ENTAIL", "PATTERN_MATCH", "PROJECTIONS",
    "PivotedQR", "QR_LORA", "QrLoraAdapter", "RankPolicy", "SVD_LORA", "SvdLoraAdapter",
    "SyntheticTask", "TaskData", "ThinSVD", "TinyTransformer", "TinyTransformerConfig",
    "TrainConfig", "TrainingDiverged", "build_adapter", "build_full_ft_adapter", "build_lora_adapter",
    "build_qr_adapter", "build_svd_lora_adapter", "config_from_dict", "count_trainable", "generate",
    "load_adapter", "load_config", "load_matrix", "load_matrix_any", "load_matrix_csv", "load_model",
    "macro_f1", "qr_pivoted", "reconstruct", "records_to_csv", "records_to_jsonl", "run_experiment",
    "save_adapter", "save_matrix", "save_model", "select_rank", "svd", "sweep_scope", "sweep_size",
    "sweep_tau", "train_model",
]
