"""Channel-segmented feature tensors and the shared similarity kernel.

Feature maps are ``(B, d, S)`` tensors: batch, channels, flattened
spatial extent. A :class:`PartitionSpec` splits the ``d`` channels by
index into contiguous common / specific / confounding segments; every
loss downstream consumes these segments through the same
:func:`pairwise_similarity` kernel so the metric can be swapped in one
place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    ConfigError,
    DegenerateBandwidth,
    DimensionMismatch,
    EmptySegment,
    ZeroVector,
)

METRICS = ("cosine", "euclidean", "hsic")

_RATIO_TOL = 1e-9


def partition_counts(d, r_c, r_p, r_n):
    """Integer channel counts for a ratio triple over ``d`` channels.

    Half-away-from-zero rounding for the common and specific segments,
    remainder to the confounding segment. The specific count is capped
    at ``d - d_c`` so the remainder can never go negative (the cap only
    binds when ``r_n = 0`` and both products land exactly on ``.5``).
    Accepts scalars or broadcastable numpy arrays; scalar inputs give
    plain ints.
    """
    d_arr = np.asarray(d, dtype=np.int64)
    d_c = np.floor(np.asarray(r_c) * d_arr + 0.5).astype(np.int64)
    d_p = np.floor(np.asarray(r_p) * d_arr + 0.5).astype(np.int64)
    d_p = np.minimum(d_p, d_arr - d_c)
    d_n = d_arr - d_c - d_p
    if d_n.ndim == 0:
        return int(d_c), int(d_p), int(d_n)
    return d_c, d_p, d_n


@dataclass(frozen=True)
class PartitionSpec:
    """Ratio triple plus channel width, with the integer split resolved.

    ``r_c + r_p + r_n`` must be 1 and ``d >= 3`` so every ratio grid
    point yields a valid tiling ``d_c + d_p + d_n = d``.
    """

    r_c: float = 0.5
    r_p: float = 0.3
    r_n: float = 0.2
    d: int = 256
    d_c: int = field(init=False)
    d_p: int = field(init=False)
    d_n: int = field(init=False)

    def __post_init__(self) -> None:
        ratios = (self.r_c, self.r_p, self.r_n)
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ConfigError(f"partition ratios must lie in [0, 1], got {ratios}")
        if abs(sum(ratios) - 1.0) > _RATIO_TOL:
            raise ConfigError(f"partition ratios must sum to 1, got {sum(ratios)!r}")
        if self.d < 3:
            raise ConfigError(f"need at least 3 channels to partition, got {self.d}")
        d_c, d_p, d_n = partition_counts(self.d, self.r_c, self.r_p, self.r_n)
        object.__setattr__(self, "d_c", d_c)
        object.__setattr__(self, "d_p", d_p)
        object.__setattr__(self, "d_n", d_n)

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.r_c, self.r_p, self.r_n)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.d_c, self.d_p, self.d_n)

    def segment_slice(self, segment: str) -> slice:
        if segment == "common":
            return slice(0, self.d_c)
        if segment == "specific":
            return slice(self.d_c, self.d_c + self.d_p)
        if segment == "confounding":
            return slice(self.d_c + self.d_p, self.d)
        raise ConfigError(f"unknown segment {segment!r}")


@dataclass(frozen=True)
class FeatureMap:
    """One granularity branch's features, spatial extent flattened.

    ``values`` is ``(B, d, S)``; ``level`` records which granularity the
    map belongs to (0 = finest).
    """

    values: torch.Tensor
    level: int = 0

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise DimensionMismatch(
                f"feature maps are (batch, channels, extent); got shape "
                f"{tuple(self.values.shape)}"
            )

    @classmethod
    def from_spatial(cls, tensor: torch.Tensor, level: int = 0) -> "FeatureMap":
        """Flatten a ``(B, d, h, w)`` activation into ``(B, d, h*w)``."""
        if tensor.ndim != 4:
            raise DimensionMismatch(
                f"spatial activations are (batch, channels, h, w); got shape "
                f"{tuple(tensor.shape)}"
            )
        return cls(tensor.flatten(2), level)

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> int:
        return self.values.shape[2]


def partition(fmap: FeatureMap, spec: PartitionSpec) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
    """Slice a feature map into (common, specific, confounding) by channel index."""
    if fmap.channels != spec.d:
        raise DimensionMismatch(
            f"partition spec covers {spec.d} channels, feature map has {fmap.channels}"
        )
    out = []
    for segment in ("common", "specific", "confounding"):
        sl = spec.segment_slice(segment)
        out.append(FeatureMap(fmap.values[:, sl, :], fmap.level))
    return tuple(out)


def segment_prototypes(fmap: FeatureMap, spec: PartitionSpec) -> torch.Tensor:
    """Per-sample channel-mean of each segment, stacked to ``(B, 3, S)``.

    Every segment must be non-empty; prototypes stay on the compute
    graph so they can be driven by the decorrelation loss.
    """
    common, specific, confounding = partition(fmap, spec)
    for seg, name in ((common, "common"), (specific, "specific"), (confounding, "confounding")):
        if seg.channels == 0:
            raise EmptySegment(f"{name} segment has no channels (spec {spec.counts})")
    return torch.stack(
        [common.values.mean(dim=1), specific.values.mean(dim=1), confounding.values.mean(dim=1)],
        dim=1,
    )


# --- similarity kernel -----------------------------------------------------


def pairwise_similarity(rows: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    """Symmetric ``(n, n)`` similarity of the rows of an ``(n, m)`` matrix.

    cosine:    unit-normalized inner products (diagonal 1).
    euclidean: ``-||r_i - r_j||_2 / sqrt(m)`` so larger still means more
               alike (diagonal 0).
    hsic:      biased HSIC between rows under a Gaussian kernel with the
               median heuristic (diagonal left as computed).
    """
    if rows.ndim != 2:
        raise DimensionMismatch(f"expected (n, m) rows, got shape {tuple(rows.shape)}")
    if rows.shape[0] < 2:
        raise DimensionMismatch("need at least two rows to compare")
    if metric == "cosine":
        return _cosine(rows)
    if metric == "euclidean":
        return _euclidean(rows)
    if metric == "hsic":
        return _hsic(rows)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def _cosine(rows: torch.Tensor) -> torch.Tensor:
    norms = rows.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroVector("cosine similarity undefined for an all-zero row")
    unit = rows / norms
    return unit @ unit.T


def _euclidean(rows: torch.Tensor) -> torch.Tensor:
    n, m = rows.shape
    sq = (rows * rows).sum(dim=1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T).clamp_min(0.0)
    # sqrt only off the diagonal: keeps the diagonal exactly 0 and keeps
    # autograd clear of d/dx sqrt(0).
    i, j = torch.triu_indices(n, n, offset=1, device=rows.device)
    dist = rows.new_zeros((n, n))
    off = torch.sqrt(d2[i, j])
    dist = dist.index_put((i, j), off).index_put((j, i), off)
    return -dist / math.sqrt(m)


def _gaussian_kernel(x: torch.Tensor) -> torch.Tensor:
    """(m, m) Gaussian kernel over scalar samples, median-heuristic bandwidth."""
    d2 = (x[:, None] - x[None, :]) ** 2
    m = x.shape[0]
    off = ~torch.eye(m, dtype=torch.bool, device=x.device)
    bandwidth = d2[off].median()
    if bandwidth <= 0:
        raise DegenerateBandwidth(
            "median off-diagonal squared distance is 0; kernel bandwidth undefined"
        )
    return torch.exp(-d2 / bandwidth)


def _hsic(rows: torch.Tensor) -> torch.Tensor:
    n, m = rows.shape
    if m < 2:
        raise DegenerateBandwidth("HSIC needs at least two coordinates per row")
    H = torch.eye(m, dtype=rows.dtype, device=rows.device) - 1.0 / m
    centered = torch.stack([H @ _gaussian_kernel(rows[k]) @ H for k in range(n)])
    sim = torch.einsum("iab,jab->ij", centered, centered) / float((m - 1) ** 2)
    return sim
