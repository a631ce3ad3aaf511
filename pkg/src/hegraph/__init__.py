"""Heterogeneous graph adapter for few-shot classification over frozen
embeddings: a typed class graph over positive/negative prompt and visual
embeddings, three-stage meta-path message passing with hand-derived
gradients, and a combined text + key-value-cache training objective.
"""

from .adapter import (
    AdapterOutput,
    AdapterWeights,
    MetaPathWeights,
    aggregate_meta_path,
    backward,
    forward,
    negative_stage,
    positive_stage,
    visual_stage,
)
from .classifier import (
    LossBreakdown,
    cache_logits,
    cross_entropy,
    fused_inference,
    predict,
    text_logits,
    total_loss,
)
from .graph import (
    ClassManifest,
    HeteroGraph,
    RelationMatrix,
    assemble_graph,
    build_graph,
    build_relations,
    class_mean_nodes,
    prompt_nodes,
)
from .io import (
    load_checkpoint,
    load_manifest,
    load_task,
    read_hgaf,
    save_checkpoint,
    write_hgaf,
)
from .optim import OptimState, Schedule
from .synth import (
    SyntheticSpec,
    SyntheticTask,
    gradient_check,
    generate,
    oracle_forward,
    random_instance,
    run_gradient_suite,
    standard_task,
)
from .tensor import (
    cosine_sim_matrix,
    finite_diff_grad,
    relu,
    row_l2_normalize,
)
from .train import (
    Checkpoint,
    EvalResult,
    PROFILES,
    TrainConfig,
    VARIANTS,
    VariantPlan,
    evaluate,
    plan_variant,
    train,
    zero_shot_accuracy,
)

__version__ = "0.1.0"
