"""relkat: relevance-knowledge acquisition and transfer.

Multi-task pretraining over heterogeneous label spaces with a learnable
prior-knowledge base, teacher-student EMA distillation, zero-shot transfer by
relevance-weighted head aggregation, incremental task addition, and simulated
federated averaging.  All numerics run on a small reverse-mode autodiff core
over float64 numpy arrays.
"""

from .autodiff import SgdConfig, Tensor, grad_check, no_grad, sgd_step
from .datagen import (
    Benchmark,
    BenchmarkConfig,
    ConceptRegistry,
    DomainTransform,
    SyntheticTaskSpec,
    TaskData,
    generate_task,
    geometric_priors,
    load_task,
    make_benchmark,
    save_task,
    subsample_fractions,
)
from .federated import FederatedSite, FederationConfig, fed_round, run_federation
from .knowledge import (
    FusionBlock,
    KnowledgeBase,
    PosteriorGenerator,
    PosteriorTemplate,
    RelevanceWeights,
    aggregate_prior,
    append_task,
    fuse,
    orthogonality_loss,
    posterior_knowledge,
    relevance_weights,
    task_similarity_loss,
)
from .metrics import (
    MetricsReport,
    auc,
    average_precision,
    bootstrap_ci,
    classification_report,
    f1,
    mcc,
    roc_curve,
    t_test,
)
from .model import (
    EncoderConfig,
    ModelConfig,
    ModelState,
    TaskForward,
    TaskHead,
    checkpoint_load,
    checkpoint_save,
    consistency_loss,
    ema_update,
)
from .training import (
    LossWeights,
    ProbeConfig,
    TrainConfig,
    composite_loss,
    cyclic_pretrain,
    few_shot_protocol,
    fine_tune,
    incremental_pretrain,
    linear_probe,
    reduced_data_protocol,
)
from .transfer import (
    CategoryMap,
    ZeroShotPrediction,
    concept_category_map,
    zero_shot_evaluate,
    zero_shot_predict,
)

__version__ = "0.1.0"

__all__ = [
    "Benchmark",
    "BenchmarkConfig",
    "CategoryMap",
    "ConceptRegistry",
    "DomainTransform",
    "EncoderConfig",
    "FederatedSite",
    "FederationConfig",
    "FusionBlock",
    "KnowledgeBase",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "ModelState",
    "PosteriorGenerator",
    "PosteriorTemplate",
    "ProbeConfig",
    "RelevanceWeights",
    "SgdConfig",
    "SyntheticTaskSpec",
    "TaskData",
    "TaskForward",
    "TaskHead",
    "Tensor",
    "TrainConfig",
    "ZeroShotPrediction",
    "aggregate_prior",
    "append_task",
    "auc",
    "average_precision",
    "bootstrap_ci",
    "checkpoint_load",
    "checkpoint_save",
    "classification_report",
    "composite_loss",
    "concept_category_map",
    "consistency_loss",
    "cyclic_pretrain",
    "ema_update",
    "f1",
    "fed_round",
    "few_shot_protocol",
    "fine_tune",
    "fuse",
    "generate_task",
    "geometric_priors",
    "grad_check",
    "incremental_pretrain",
    "linear_probe",
    "load_task",
    "make_benchmark",
    "mcc",
    "no_grad",
    "orthogonality_loss",
    "posterior_knowledge",
    "reduced_data_protocol",
    "relevance_weights",
    "roc_curve",
    "run_federation",
    "save_task",
    "sgd_step",
    "subsample_fractions",
    "t_test",
    "task_similarity_loss",
    "zero_shot_evaluate",
    "zero_shot_predict",
    "__version__",
]
