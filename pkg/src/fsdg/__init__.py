"""Feature structuralization for fine-grained domain generalization.

Desk-scale implementation of hierarchy-aligned channel partitioning:
feature channels split into common / specific / confounding segments,
five structuralization quantities trained jointly with classification,
plus the channel-concept analysis that checks whether the learned
layout matches the label hierarchy.
"""

__version__ = "0.1.0"

from .data import ImageDataset
from .featurespace import (
    FeatureMap,
    METRICS,
    PartitionSpec,
    pairwise_similarity,
    partition,
    partition_counts,
    segment_prototypes,
)
from .hierarchy import GranularityHierarchy, from_class_vectors, load_hierarchy
from .losses import (
    CentroidSet,
    StructuralizationTerms,
    common_subcentroids,
    commonality_scale_similarity,
    commonality_sibling_similarity,
    decorrelation_loss,
    specificity_centroids,
    specificity_separation,
    structuralization_terms,
)
from .network import (
    BranchHead,
    FineOnlyNet,
    SmallConvBackbone,
    StructuredNet,
    TransitionLayer,
    count_parameters,
    load_checkpoint,
    prune_to_fine,
    save_checkpoint,
)
from .objectives import (
    BranchOutputs,
    EpsilonSchedule,
    MODES,
    ObjectiveConfig,
    coarse_objective,
    fs_objective,
    prediction_calibration,
    total_objective,
)
from .explain import (
    ConceptRelevanceTable,
    OverlapMatrix,
    compute_relevance,
    ground_truth_matrix,
    overlap_matrix,
    segment_overlap_stats,
    spearman_alignment,
)
from .synthdata import DOMAIN_PRESETS, DomainSpec, SynthSpec, build_tree, generate
from .trainer import (
    EvalResult,
    GridSearchResult,
    StepLog,
    TrainConfig,
    TrainResult,
    evaluate,
    gradient_check,
    grid_search_with_training,
    lr_coefficient,
    progressive_grid_search,
    train,
    weight_hash,
)

__all__ = [name for name in dir() if not name.startswith("_")]
