"""Channel-concept analysis: which channels matter for which classes.

The relevance of channel ``j`` to a sample is its pooled fine-branch
activation times the fine classifier weight for the sample's own class.
Per channel we keep the 40 highest-relevance records; a channel's score
for class ``k`` is the summed relevance of the kept records labeled
``k``. Rankings, top-k overlap matrices (optionally restricted to one
channel segment), and the rank correlation against the hierarchy's
ground-truth class similarity all derive from that table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .data import ImageDataset
from .errors import (
    ConfigError,
    DimensionMismatch,
    OutOfRangeClass,
    TooFewPairs,
    UntrainedModel,
)
from .featurespace import PartitionSpec
from .hierarchy import GranularityHierarchy


@dataclass(frozen=True)
class ChannelRecord:
    sample_id: str
    relevance: float
    label: int


@dataclass
class ConceptRelevanceTable:
    """Per-channel top records plus the derived per-class channel rankings.

    ``scores[k, j]`` is class ``k``'s score for channel ``j``;
    ``rankings[k]`` lists all channel ids, best first (score descending,
    ties broken toward the lower channel index).
    """

    records: list[list[ChannelRecord]]
    scores: np.ndarray
    rankings: np.ndarray
    num_classes: int
    channels: int
    top_n: int

    def top_channels(self, class_id: int, top_k: int = 26) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise OutOfRangeClass(f"class {class_id} outside [0, {self.num_classes})")
        if not 1 <= top_k <= self.channels:
            raise ConfigError(f"top_k must lie in [1, {self.channels}], got {top_k}")
        return self.rankings[class_id, :top_k].copy()


def compute_relevance(
    model,
    dataset: ImageDataset,
    top_n: int = 40,
    batch_size: int = 128,
) -> ConceptRelevanceTable:
    """Build the channel-concept table from a trained fine branch.

    ``model`` must expose ``fine_pooled_features`` and
    ``fine_classifier_weights`` (the full network and the pruned fine
    path both do).
    """
    for attr in ("fine_pooled_features", "fine_classifier_weights"):
        if not hasattr(model, attr):
            raise UntrainedModel(f"model lacks {attr}; train or load a checkpoint first")
    if top_n < 1:
        raise ConfigError("top_n must be positive")
    weights = model.fine_classifier_weights().detach()
    num_classes, channels = weights.shape
    if dataset.num_classes != num_classes:
        raise DimensionMismatch(
            f"dataset has {dataset.num_classes} classes, classifier {num_classes}"
        )

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    rel_rows: list[np.ndarray] = []
    with torch.no_grad():
        for x, y in dataset.batches(batch_size):
            pooled = model.fine_pooled_features(x)
            rel_rows.append((pooled * weights[y]).numpy())
    if was_training:
        model.train()
    relevance = np.concatenate(rel_rows, axis=0)  # (N, channels)
    labels = dataset.labels.numpy()

    records: list[list[ChannelRecord]] = []
    keep = min(top_n, relevance.shape[0])
    for j in range(channels):
        col = relevance[:, j]
        # Highest relevance first; equal values fall back to sample order.
        order = np.lexsort((np.arange(col.shape[0]), -col))[:keep]
        records.append(
            [ChannelRecord(dataset.sample_ids[i], float(col[i]), int(labels[i]))
             for i in order]
        )

    scores = np.zeros((num_classes, channels), dtype=np.float64)
    for j, recs in enumerate(records):
        for r in recs:
            scores[r.label, j] += r.relevance
    rankings = np.empty((num_classes, channels), dtype=np.int64)
    for k in range(num_classes):
        rankings[k] = np.lexsort((np.arange(channels), -scores[k]))
    return ConceptRelevanceTable(
        records=records, scores=scores, rankings=rankings,
        num_classes=num_classes, channels=channels, top_n=top_n,
    )


SEGMENTS = ("all", "common", "specific", "confounding")


@dataclass(frozen=True)
class OverlapMatrix:
    """Pairwise shared-channel counts among per-class top-k sets.

    Diagonal entries are ``top_k`` by convention. When restricted to a
    segment, only channels inside that segment's index range count, but
    the top-k sets themselves stay segment-agnostic.
    """

    matrix: np.ndarray
    classes: tuple[int, ...]
    top_k: int
    segment: str

    def __post_init__(self) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != len(self.classes):
            raise DimensionMismatch("overlap matrix must be square over the class list")


def overlap_matrix(
    table: ConceptRelevanceTable,
    classes,
    top_k: int = 26,
    segment: str = "all",
    spec: PartitionSpec | None = None,
) -> OverlapMatrix:
    """Count shared top-``top_k`` channels for every class pair."""
    if segment not in SEGMENTS:
        raise ConfigError(f"unknown segment {segment!r}; choose from {SEGMENTS}")
    if segment != "all":
        if spec is None:
            raise ConfigError("segment-restricted overlap needs a partition spec")
        if spec.d != table.channels:
            raise DimensionMismatch(
                f"partition spec covers {spec.d} channels, table has {table.channels}"
            )
    classes = tuple(int(k) for k in classes)
    tops = {k: set(table.top_channels(k, top_k).tolist()) for k in classes}
    if segment != "all":
        sl = spec.segment_slice(segment)
        allowed = set(range(sl.start, sl.stop))
        tops = {k: chans & allowed for k, chans in tops.items()}
    n = len(classes)
    out = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            if a == b:
                out[a, b] = top_k
            else:
                out[a, b] = len(tops[classes[a]] & tops[classes[b]])
    return OverlapMatrix(matrix=out, classes=classes, top_k=top_k, segment=segment)


def segment_overlap_stats(
    table: ConceptRelevanceTable,
    classes,
    spec: PartitionSpec,
    top_k: int = 26,
) -> list[dict]:
    """Per-class totals of shared channels against all other listed classes.

    ``All`` counts shared channels with multiplicity across the other
    classes; ``Com``/``Spe``/``Conf`` split the same count by segment;
    ``RatioCom`` is ``Com / All`` (0 when nothing is shared).
    """
    classes = tuple(int(k) for k in classes)
    mats = {seg: overlap_matrix(table, classes, top_k, seg, spec) for seg in SEGMENTS}
    rows = []
    for i, k in enumerate(classes):
        others = [j for j in range(len(classes)) if j != i]
        totals = {seg: int(mats[seg].matrix[i, others].sum()) for seg in SEGMENTS}
        all_count = totals["all"]
        rows.append({
            "class": k,
            "All": all_count,
            "Com": totals["common"],
            "Spe": totals["specific"],
            "Conf": totals["confounding"],
            "RatioCom": (totals["common"] / all_count) if all_count else 0.0,
        })
    return rows


def ground_truth_matrix(hierarchy: GranularityHierarchy, classes) -> np.ndarray:
    """Pairwise hierarchy similarity (shared levels) for the listed classes."""
    classes = tuple(int(k) for k in classes)
    n = len(classes)
    out = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            out[a, b] = hierarchy.class_distance(classes[a], classes[b])
    return out


def spearman_alignment(observed, expected) -> float:
    """Spearman rank correlation over the strictly-lower-triangular entries.

    Both arguments may be raw square matrices or :class:`OverlapMatrix`
    instances; they must agree in shape and cover at least 3 classes.
    """
    a = observed.matrix if isinstance(observed, OverlapMatrix) else np.asarray(observed)
    b = expected.matrix if isinstance(expected, OverlapMatrix) else np.asarray(expected)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"matrices disagree: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 3:
        raise TooFewPairs("rank correlation needs at least 3 classes (3 pairs)")
    i, j = np.tril_indices(n, k=-1)
    return float(stats.spearmanr(a[i, j], b[i, j]).statistic)
