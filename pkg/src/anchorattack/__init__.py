"""Gray-box adversarial attacks on vision encoders.

The package is organized around a provider contract (in-process reference
encoder or a remote one behind a small wire protocol), a prototype bank
built from a guidance image set, a two-stage attention-weighted
sign-gradient attack engine, and an evaluation harness with a synthetic
fixture task.
"""

from .attack import (
    AttackConfig,
    AttackTrace,
    LossBreakdown,
    StepRecord,
    attention_weights,
    guide_loss,
    objective,
    objective_cotangent,
    pa_attack,
    pgd_stage,
    vision_loss,
)
from .encoder import (
    AttentionProfile,
    EncoderConfig,
    EncoderState,
    TokenFeatures,
    encode,
    fd_gradient_oracle,
    init_encoder,
    vjp,
)
from .evalharness import (
    ShiftStats,
    SrrReport,
    SurrogateTask,
    ablation_suite,
    attention_shift,
    make_retrieval_task,
    srr,
    token_mask_experiment,
    train_probe,
)
from .prototypes import (
    GuidanceMemory,
    PcaModel,
    PrototypeBank,
    build_memory,
    build_prototypes,
    kmeans,
    pca_fit,
    pca_project,
    select_anchor,
)
from .providers import EncoderInfo, LocalEncoderProvider, RemoteEncoderProvider, connect_tcp
from .server import TcpEncoderServer

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "AttentionProfile",
    "EncoderConfig",
    "EncoderInfo",
    "EncoderState",
    "GuidanceMemory",
    "LocalEncoderProvider",
    "LossBreakdown",
    "PcaModel",
    "PrototypeBank",
    "RemoteEncoderProvider",
    "ShiftStats",
    "SrrReport",
    "StepRecord",
    "SurrogateTask",
    "TcpEncoderServer",
    "TokenFeatures",
    "ablation_suite",
    "attention_shift",
    "attention_weights",
    "build_memory",
    "build_prototypes",
    "connect_tcp",
    "encode",
    "fd_gradient_oracle",
    "guide_loss",
    "init_encoder",
    "kmeans",
    "make_retrieval_task",
    "objective",
    "objective_cotangent",
    "pa_attack",
    "pca_fit",
    "pca_project",
    "pgd_stage",
    "select_anchor",
    "srr",
    "token_mask_experiment",
    "train_probe",
    "vision_loss",
    "vjp",
]

__version__ = "0.1.0"
