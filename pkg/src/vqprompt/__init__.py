"""Vector-quantized prompt selection for class-incremental learning.

A self-contained laboratory: a small reverse-mode autodiff engine, a
freezable transformer backbone with prefix injection, a trainable prompt
codebook with straight-through quantization, the continual training and
calibration loop, a deterministic synthetic benchmark, and the FAA/CAA
metrics -- all on float64 numpy, with numba-accelerated hot kernels.
"""

from .backbone import Backbone, BackboneConfig, msa_forward, prefix_tuned_msa, pretrain_backbone
from .data import TaskDataset, TaskSequence, TaskSplits, generate_benchmark, read_dataset, write_dataset
from .errors import (
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    ProtocolError,
    VQPromptError,
)
from .gradcheck import grad_check
from .metrics import AccuracyMatrix, caa, faa
from .optim import AdamW, cosine_rate
from .prompting import (
    LossWeights,
    PromptPool,
    PromptSelection,
    aggregate_prompt,
    commitment_loss,
    compute_query,
    quantize_prompt,
    select_prompt,
    similarity_scores,
    soft_prompt_forward,
    total_loss,
    vq_loss,
)
from .tensor import Tensor, no_grad, stop_gradient, straight_through
from .training import (
    ClassStatistics,
    ClassifierHead,
    ContinualState,
    TrainConfig,
    calibrate_classifier,
    collect_class_statistics,
    evaluate_split,
    run_continual,
    sample_pseudo_features,
    train_task,
)

__version__ = "0.1.0"
