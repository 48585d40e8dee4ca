"""Training objectives: classification, calibration, and their combination.

Three modes share one entry point:

- ``fsdg``: coarse cross-entropy + hierarchy-calibrated fine KL + the
  weighted structuralization objective;
- ``fgdg_lf``: coarse cross-entropy + the calibrated fine KL only;
- ``fgdg_baseline``: coarse cross-entropy + an epsilon-scaled fine
  cross-entropy (the degenerate one-hot form of the KL term).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .errors import (
    BatchMismatch,
    ConfigError,
    LabelOutOfRange,
    MissingComponent,
    NotADistribution,
    SingleLevelHierarchy,
)
from .hierarchy import GranularityHierarchy

MODES = ("fsdg", "fgdg_baseline", "fgdg_lf")

_PROB_FLOOR = 1e-12
_SUM_TOL = 1e-6


@dataclass(frozen=True)
class EpsilonSchedule:
    """Weight trajectory for the one-hot share of the calibration target.

    ``constant`` holds ``end`` throughout; ``linear_ramp`` moves from
    ``start`` to ``end`` over the first ``ramp_fraction`` of training and
    holds ``end`` afterwards.
    """

    kind: str = "linear_ramp"
    start: float = 0.0
    end: float = 1.0
    ramp_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "linear_ramp"):
            raise ConfigError(f"unknown epsilon schedule {self.kind!r}")
        for name, v in (("start", self.start), ("end", self.end)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"epsilon {name} must lie in [0, 1], got {v}")
        if self.kind == "linear_ramp" and not 0.0 < self.ramp_fraction <= 1.0:
            raise ConfigError("ramp_fraction must lie in (0, 1]")

    def value_at(self, progress: float) -> float:
        """Epsilon at ``progress`` in [0, 1] through training."""
        progress = min(max(progress, 0.0), 1.0)
        if self.kind == "constant":
            return self.end
        t = min(progress / self.ramp_fraction, 1.0)
        return self.start + (self.end - self.start) * t


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights and options of the combined objective.

    ``lambda_dec`` scales the decorrelation term (1.0 reproduces the
    plain sum); setting every structuralization weight to 0 makes the
    full mode coincide with ``fgdg_lf`` exactly.
    """

    lambda_cs: float = 0.05
    lambda_cd: float = 0.5
    lambda_p: float = 1.0
    lambda_dec: float = 1.0
    metric: str = "cosine"
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    mode: str = "fsdg"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        for name in ("lambda_cs", "lambda_cd", "lambda_p", "lambda_dec"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def with_lambdas(self, **lambdas: float) -> "ObjectiveConfig":
        return replace(self, **lambdas)


@dataclass
class BranchOutputs:
    """Per-granularity classifier outputs, fine first.

    ``logits[g]`` is ``(B, K_g)``. ``softmaxed`` marks already-normalized
    rows (then every row must sum to 1).
    """

    logits: list[torch.Tensor]
    softmaxed: bool = False

    def __post_init__(self) -> None:
        if not self.logits:
            raise MissingComponent("no branch outputs")
        B = self.logits[0].shape[0]
        for g, t in enumerate(self.logits):
            if t.ndim != 2:
                raise BatchMismatch(f"branch {g} outputs must be (B, K_g)")
            if t.shape[0] != B:
                raise BatchMismatch(f"branch {g} batch {t.shape[0]} != {B}")
        if self.softmaxed:
            for g, t in enumerate(self.logits):
                rows = t.sum(dim=1)
                if bool((rows - 1.0).abs().max() > _SUM_TOL) or bool((t < 0).any()):
                    raise NotADistribution(f"branch {g} rows are not distributions")

    @property
    def levels(self) -> int:
        return len(self.logits)

    def probabilities(self, g: int) -> torch.Tensor:
        t = self.logits[g]
        return t if self.softmaxed else F.softmax(t, dim=1)

    def log_probabilities(self, g: int) -> torch.Tensor:
        t = self.logits[g]
        if self.softmaxed:
            return torch.log(t.clamp_min(_PROB_FLOOR))
        return F.log_softmax(t, dim=1)


def _check_labels(labels: torch.Tensor, num_classes: int, what: str) -> None:
    if labels.numel() == 0:
        raise BatchMismatch(f"empty {what} label batch")
    if bool((labels < 0).any()) or bool((labels >= num_classes).any()):
        raise LabelOutOfRange(f"{what} label outside [0, {num_classes})")


def coarse_objective(outputs: BranchOutputs, coarse_labels: list[torch.Tensor]) -> torch.Tensor:
    """Sum of cross-entropies over the coarse branches (levels 1..G-1)."""
    if outputs.levels < 2:
        raise SingleLevelHierarchy("coarse objective needs at least two branches")
    if len(coarse_labels) != outputs.levels - 1:
        raise BatchMismatch(
            f"expected labels for {outputs.levels - 1} coarse branches, got {len(coarse_labels)}"
        )
    total = None
    for g in range(1, outputs.levels):
        labels = torch.as_tensor(coarse_labels[g - 1], dtype=torch.long,
                                 device=outputs.logits[g].device)
        if labels.shape[0] != outputs.logits[g].shape[0]:
            raise BatchMismatch(f"branch {g} labels do not match its batch")
        _check_labels(labels, outputs.logits[g].shape[1], f"level-{g}")
        ce = F.nll_loss(outputs.log_probabilities(g), labels)
        total = ce if total is None else total + ce
    return total


def prediction_calibration(
    outputs: BranchOutputs,
    fine_labels,
    hierarchy: GranularityHierarchy,
    epsilon: float,
) -> torch.Tensor:
    """KL from the hierarchy-blended target to the fine prediction.

    The target mixes the one-hot fine label (weight ``epsilon``) with the
    mean of all coarse predictions expanded down to the fine level
    (weight ``1 - epsilon``); gradients flow into both the fine and the
    coarse branches.
    """
    if outputs.levels < 2:
        raise SingleLevelHierarchy("calibration needs at least one coarse branch")
    if outputs.levels != hierarchy.levels:
        raise BatchMismatch(
            f"{outputs.levels} branches but hierarchy has {hierarchy.levels} levels"
        )
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    fine = outputs.logits[0]
    B, K0 = fine.shape
    labels = torch.as_tensor(fine_labels, dtype=torch.long, device=fine.device)
    if labels.shape[0] != B:
        raise BatchMismatch("fine labels do not match the batch")
    _check_labels(labels, K0, "fine")

    expanded = []
    for g in range(1, outputs.levels):
        mat = torch.as_tensor(
            hierarchy.expansion_matrix(g), dtype=fine.dtype, device=fine.device
        )
        expanded.append(outputs.probabilities(g) @ mat)
    coarse_mean = torch.stack(expanded).mean(dim=0)
    onehot = F.one_hot(labels, K0).to(fine.dtype)
    target = epsilon * onehot + (1.0 - epsilon) * coarse_mean

    log_pred = outputs.log_probabilities(0)
    # KL(target || pred) with 0 log 0 := 0 on the target side.
    safe = target.clamp_min(_PROB_FLOOR)
    kl = (target * (torch.log(safe) - log_pred)).sum(dim=1)
    return kl.mean()


def fs_objective(
    decorrelation: torch.Tensor,
    scale_similarity: torch.Tensor,
    sibling_similarity: torch.Tensor,
    separation: torch.Tensor,
    config: ObjectiveConfig,
) -> torch.Tensor:
    """Weighted structuralization objective (decorrelation kept positive,
    the two commonality rewards subtracted, separation penalized)."""
    return (
        config.lambda_dec * decorrelation
        - config.lambda_cs * scale_similarity
        - config.lambda_cd * sibling_similarity
        + config.lambda_p * separation
    )


def total_objective(
    mode: str,
    *,
    classification: torch.Tensor,
    calibration: torch.Tensor | None = None,
    structuralization: torch.Tensor | None = None,
    fine_logits: torch.Tensor | None = None,
    fine_labels=None,
    epsilon: float | None = None,
) -> torch.Tensor:
    """Combine the loss components the way the selected mode prescribes."""
    if mode == "fsdg":
        if calibration is None or structuralization is None:
            raise MissingComponent("fsdg needs calibration and structuralization terms")
        return classification + calibration + structuralization
    if mode == "fgdg_lf":
        if calibration is None:
            raise MissingComponent("fgdg_lf needs the calibration term")
        return classification + calibration
    if mode == "fgdg_baseline":
        if fine_logits is None or fine_labels is None or epsilon is None:
            raise MissingComponent("fgdg_baseline needs fine logits, labels, and epsilon")
        labels = torch.as_tensor(fine_labels, dtype=torch.long, device=fine_logits.device)
        _check_labels(labels, fine_logits.shape[1], "fine")
        fine_ce = F.cross_entropy(fine_logits, labels)
        return classification + epsilon * fine_ce
    raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
