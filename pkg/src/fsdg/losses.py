"""Structuralization losses over partitioned feature maps.

Five quantities drive the channel layout:

- decorrelation: segment prototypes of one sample should be mutually
  dissimilar (pushes common/specific/confounding apart channel-wise);
- commonality scale similarity: common segments of adjacent granularities
  should describe the same thing;
- commonality sibling similarity: common sub-centroids under one parent
  should coincide;
- specificity separation: specific centroids of different classes should
  not (it enters the objective with a positive sign and gets minimized);
- the aggregate helper averages everything across branches the way the
  training step consumes it.

All quantities are plain tensor expressions, differentiable almost
everywhere, and never detach their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    BatchMismatch,
    EmptyGroup,
    LabelOutOfRange,
    TooFewClasses,
    ZeroVector,
)
from .featurespace import (
    FeatureMap,
    PartitionSpec,
    pairwise_similarity,
    partition,
    segment_prototypes,
)
from .hierarchy import GranularityHierarchy


def _safe_norms(values: torch.Tensor, dim: int, norm_floor: float, what: str) -> torch.Tensor:
    """Row norms for cosine, either strict (0 raises) or floored.

    The floor mirrors the calibration loss's probability floor: a
    ReLU-silenced segment yields an exactly-zero vector mid-training, and
    treating it as orthogonal (cosine 0) keeps the step well-defined —
    the upstream ReLU already blocks any gradient through it.
    """
    norms = values.norm(dim=dim, keepdim=True)
    if norm_floor > 0:
        return norms.clamp_min(norm_floor)
    if bool((norms == 0).any()):
        raise ZeroVector(f"{what} is identically zero")
    return norms


def similarity_deviation(
    rows: torch.Tensor, metric: str = "cosine", norm_floor: float = 0.0
) -> torch.Tensor:
    """Mean of ``similarity(rows) - I`` over all entries, diagonal included."""
    if metric == "cosine":
        unit = rows / _safe_norms(rows, 1, norm_floor, "a compared row")
        sim = unit @ unit.T
    else:
        sim = pairwise_similarity(rows, metric)
    eye = torch.eye(sim.shape[0], dtype=sim.dtype, device=sim.device)
    return (sim - eye).mean()


def decorrelation_loss(
    prototypes: torch.Tensor, metric: str = "cosine", norm_floor: float = 0.0
) -> torch.Tensor:
    """Average per-sample deviation of the 3x3 prototype similarity from identity.

    ``prototypes`` is ``(B, 3, S)`` as produced by
    :func:`~fsdg.featurespace.segment_prototypes`. Batched fast paths for
    cosine and euclidean; metrics without one fall back to a per-sample
    loop over :func:`pairwise_similarity`.
    """
    if prototypes.ndim != 3:
        raise BatchMismatch(
            f"expected (batch, segments, extent) prototypes, got {tuple(prototypes.shape)}"
        )
    B, K, S = prototypes.shape
    eye = torch.eye(K, dtype=prototypes.dtype, device=prototypes.device)
    if metric == "cosine":
        unit = prototypes / _safe_norms(prototypes, 2, norm_floor, "a segment prototype")
        gram = unit @ unit.transpose(1, 2)
        return (gram - eye).mean()
    if metric == "euclidean":
        sq = (prototypes * prototypes).sum(dim=2)
        d2 = (sq[:, :, None] + sq[:, None, :] - 2.0 * prototypes @ prototypes.transpose(1, 2))
        d2 = d2.clamp_min(0.0)
        i, j = torch.triu_indices(K, K, offset=1, device=prototypes.device)
        dist = prototypes.new_zeros((B, K, K))
        off = torch.sqrt(d2[:, i, j])
        dist[:, i, j] = off
        dist[:, j, i] = off
        sim = -dist / float(S) ** 0.5
        return (sim - eye).mean()
    per_sample = [similarity_deviation(prototypes[b], metric) for b in range(B)]
    return torch.stack(per_sample).mean()


def commonality_scale_similarity(
    fine_common: FeatureMap, coarse_common: FeatureMap, norm_floor: float = 0.0
) -> torch.Tensor:
    """Batch-mean cosine between flattened common segments of two branches.

    Channels and spatial positions flatten together, so the two maps must
    agree sample-for-sample in batch, channel count, and extent.
    """
    a, b = fine_common.values, coarse_common.values
    if a.shape[0] != b.shape[0]:
        raise BatchMismatch(
            f"branches disagree on batch size: {a.shape[0]} vs {b.shape[0]}"
        )
    if a.shape[1:] != b.shape[1:]:
        raise BatchMismatch(
            f"common segments disagree in shape: {tuple(a.shape[1:])} vs {tuple(b.shape[1:])}"
        )
    flat_a = a.flatten(1)
    flat_b = b.flatten(1)
    na = _safe_norms(flat_a, 1, norm_floor, "a flattened common segment")
    nb = _safe_norms(flat_b, 1, norm_floor, "a flattened common segment")
    cos = (flat_a * flat_b).sum(dim=1, keepdim=True) / (na * nb)
    return cos.mean()


@dataclass(frozen=True)
class CentroidSet:
    """Per-class mean vectors of one segment at one granularity level."""

    centroids: torch.Tensor  # (K, m)
    class_ids: tuple[int, ...]
    level: int
    segment: str

    def __post_init__(self) -> None:
        if self.centroids.ndim != 2 or self.centroids.shape[0] == 0:
            raise EmptyGroup("a centroid set needs at least one (K, m) row")
        if len(self.class_ids) != self.centroids.shape[0]:
            raise BatchMismatch(
                f"{self.centroids.shape[0]} centroids but {len(self.class_ids)} class ids"
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            raise EmptyGroup("duplicate class id in centroid set")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


def common_subcentroids(
    common: FeatureMap, grouping: dict[tuple[int, int], np.ndarray]
) -> dict[int, CentroidSet]:
    """Spatially pooled common-segment centroid per (parent, sub-class) group.

    ``grouping`` comes from :meth:`GranularityHierarchy.group_by_parent`
    at this map's level; the result maps each parent id to the centroid
    set of its sub-classes present in the batch.
    """
    pooled = common.values.mean(dim=2)  # (B, d_c)
    per_parent: dict[int, list[tuple[int, torch.Tensor]]] = {}
    for (parent, sub), idx in grouping.items():
        idx = np.asarray(idx)
        if idx.size == 0:
            raise EmptyGroup(f"group ({parent}, {sub}) has no samples")
        if idx.min() < 0 or idx.max() >= common.batch:
            raise LabelOutOfRange(
                f"group ({parent}, {sub}) indexes outside the batch of {common.batch}"
            )
        centroid = pooled[torch.as_tensor(idx, device=pooled.device)].mean(dim=0)
        per_parent.setdefault(parent, []).append((sub, centroid))
    out: dict[int, CentroidSet] = {}
    for parent, items in per_parent.items():
        out[parent] = CentroidSet(
            centroids=torch.stack([c for _, c in items]),
            class_ids=tuple(sub for sub, _ in items),
            level=common.level,
            segment="common",
        )
    return out


def commonality_sibling_similarity(
    cset: CentroidSet, metric: str = "cosine", norm_floor: float = 0.0
) -> torch.Tensor:
    """Mean off-identity similarity among sub-centroids of one parent."""
    if cset.size < 2:
        raise TooFewClasses("sibling similarity needs at least two sub-centroids")
    return similarity_deviation(cset.centroids, metric, norm_floor)


def specificity_centroids(specific: FeatureMap, labels) -> CentroidSet:
    """Spatially pooled specific-segment centroid per class present in the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=specific.values.device)
    if labels.ndim != 1 or labels.shape[0] != specific.batch:
        raise BatchMismatch(
            f"need one label per sample: {tuple(labels.shape)} labels for batch {specific.batch}"
        )
    if labels.numel() == 0:
        raise EmptyGroup("empty batch has no centroids")
    if bool((labels < 0).any()):
        raise LabelOutOfRange("negative class label")
    pooled = specific.values.mean(dim=2)
    present = torch.unique(labels, sorted=True)
    centroids = torch.stack([pooled[labels == k].mean(dim=0) for k in present])
    return CentroidSet(
        centroids=centroids,
        class_ids=tuple(int(k) for k in present),
        level=specific.level,
        segment="specific",
    )


def specificity_separation(
    cset: CentroidSet, metric: str = "cosine", norm_floor: float = 0.0
) -> torch.Tensor:
    """Mean off-identity similarity among class centroids (to be minimized)."""
    if cset.size < 2:
        raise TooFewClasses("separation needs at least two class centroids")
    return similarity_deviation(cset.centroids, metric, norm_floor)


@dataclass
class StructuralizationTerms:
    """Batch-level aggregates of the four feature-space quantities.

    ``skipped_*`` count contributions that had fewer than two members in
    the batch and therefore dropped out of the corresponding mean.
    """

    decorrelation: torch.Tensor
    scale_similarity: torch.Tensor
    sibling_similarity: torch.Tensor
    separation: torch.Tensor
    sibling_contributions: int = 0
    separation_contributions: int = 0
    skipped_sibling: int = 0
    skipped_separation: int = 0


TRAINING_NORM_FLOOR = 1e-12


def structuralization_terms(
    features: list[FeatureMap],
    spec: PartitionSpec,
    hierarchy: GranularityHierarchy,
    fine_labels,
    metric: str = "cosine",
    norm_floor: float = TRAINING_NORM_FLOOR,
) -> StructuralizationTerms:
    """Aggregate the four quantities across granularity branches.

    - decorrelation: mean over all ``G`` branches;
    - scale similarity: mean over the ``G-1`` adjacent branch pairs;
    - sibling similarity: flat mean over every (level, parent) with at
      least two sub-centroids in the batch, levels ``0..G-2``;
    - separation: flat mean over the levels whose batch shows at least
      two classes.

    ``features`` must hold one map per level in fine-to-coarse order.
    The default ``norm_floor`` makes the batch quantities robust to
    ReLU-silenced segments during training; pass 0 for the strict
    zero-rejecting behavior of the individual quantities.
    """
    G = hierarchy.levels
    if len(features) != G:
        raise BatchMismatch(f"expected {G} feature maps, got {len(features)}")
    for g, fmap in enumerate(features):
        if fmap.level != g:
            raise BatchMismatch(f"feature map at position {g} carries level {fmap.level}")

    fine_labels = np.asarray(fine_labels, dtype=np.int64)
    device = features[0].values.device
    dtype = features[0].values.dtype

    commons: list[FeatureMap] = []
    dec_terms: list[torch.Tensor] = []
    sep_terms: list[torch.Tensor] = []
    skipped_sep = 0
    for g, fmap in enumerate(features):
        common, specific, _ = partition(fmap, spec)
        commons.append(common)
        dec_terms.append(
            decorrelation_loss(segment_prototypes(fmap, spec), metric, norm_floor)
        )
        level_labels = hierarchy.ancestors(fine_labels, g)
        cset = specificity_centroids(specific, level_labels)
        if cset.size >= 2:
            sep_terms.append(specificity_separation(cset, metric, norm_floor))
        else:
            skipped_sep += 1

    cs_terms: list[torch.Tensor] = []
    sib_terms: list[torch.Tensor] = []
    skipped_sib = 0
    for g in range(G - 1):
        cs_terms.append(
            commonality_scale_similarity(commons[g], commons[g + 1], norm_floor)
        )
        grouping = hierarchy.group_by_parent(fine_labels, g)
        for parent, cset in common_subcentroids(commons[g], grouping).items():
            if cset.size >= 2:
                sib_terms.append(commonality_sibling_similarity(cset, metric, norm_floor))
            else:
                skipped_sib += 1

    zero = torch.zeros((), dtype=dtype, device=device)
    return StructuralizationTerms(
        decorrelation=torch.stack(dec_terms).mean(),
        scale_similarity=torch.stack(cs_terms).mean(),
        sibling_similarity=torch.stack(sib_terms).mean() if sib_terms else zero,
        separation=torch.stack(sep_terms).mean() if sep_terms else zero,
        sibling_contributions=len(sib_terms),
        separation_contributions=len(sep_terms),
        skipped_sibling=skipped_sib,
        skipped_separation=skipped_sep,
    )
