"""In-memory image datasets shared by training, evaluation, and analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BatchMismatch, EmptyDataset, LabelOutOfRange


@dataclass
class ImageDataset:
    """A stack of images with fine labels from one domain.

    ``images`` is ``(N, 3, H, W)`` float32 in [0, 1]; ``labels`` holds
    fine class ids. ``num_classes`` is carried explicitly so datasets in
    which some class happens to be absent still evaluate correctly.
    """

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    domain: str = ""
    sample_ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise BatchMismatch(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise BatchMismatch("one label per image required")
        if self.labels.numel():
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= self.num_classes:
                raise LabelOutOfRange(
                    f"labels span [{lo}, {hi}] but num_classes={self.num_classes}"
                )
        if not self.sample_ids:
            self.sample_ids = tuple(str(i) for i in range(self.images.shape[0]))
        elif len(self.sample_ids) != self.images.shape[0]:
            raise BatchMismatch("one sample id per image required")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            domain=self.domain,
            sample_ids=tuple(self.sample_ids[i] for i in idx),
        )

    def split(self, fraction: float, seed: int = 0) -> tuple["ImageDataset", "ImageDataset"]:
        """Shuffled (head, tail) split; ``fraction`` goes to the head."""
        if len(self) == 0:
            raise EmptyDataset("cannot split an empty dataset")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut]), self.subset(order[cut:])

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.images[start:start + batch_size], self.labels[start:start + batch_size]
