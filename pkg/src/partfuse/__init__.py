"""partfuse: merge, partially fuse, and generally prune dense feedforward networks.

Partial fusion matches only the most similar neurons of two networks via
partial optimal transport and keeps the rest isolated, interpolating between
weight aggregation and a full ensemble; generalized pruning compresses an
ensemble (or single network) by sandwiching each weight matrix between a
pair of transport kernels.
"""

from .analysis import (
    ParamReport,
    RunRecord,
    SimilarityReport,
    count_params,
    similarity_stats,
    theoretical_counts,
    tradeoff_sweep,
)
from .clustering import (
    ClusterAssignment,
    assignment_to_kernels,
    brute_force_clustering,
    clustering_objective,
    greedy_ward,
    lloyd,
    stochastic_ward,
)
from .data import (
    SplitSpec,
    heterogeneous_split,
    holdout,
    load_idx,
    synthetic_blobs,
)
from .fusion import (
    AlignMethod,
    AlignResult,
    FeatureKind,
    FusionConfig,
    MatchPlan,
    assemble_partial_layer,
    features_activation,
    features_weight,
    fixed_point_align,
    greedy_align,
    ot_fuse,
    partial_fuse,
    split_partial_neuron,
)
from .genprune import (
    PruneMethod,
    PruneSpec,
    apply_generalized_pruning,
    cluster_prune,
    partial_fusion_as_pruning_kernels,
    prune_with_postprocess,
    unstructured_prune,
)
from .netcore import (
    ActivationKind,
    DenseNetwork,
    LabeledDataset,
    activations,
    evaluate_accuracy,
    forward,
    load,
    make_ensemble,
    permute_hidden_layer,
    save,
)
from .train import TrainConfig, fine_tune, gradient_check, train_mlp
from .transport import (
    Coupling,
    DiscreteMeasure,
    KernelPair,
    PartialCoupling,
    brute_force_ot,
    cost_matrix,
    coupling_to_kernels,
    restrict_normalize_partial,
    solve_ot,
    solve_partial_ot,
)

__version__ = "0.1.0"
