"""Training loop, evaluation, gradient checking, and the tuning protocol.

One optimizer step backpropagates a single combined scalar (the mode's
total objective); the structuralization terms are not given separate
steps. SGD with momentum, a 10x learning-rate multiplier on the
transition/head parameters, and a linear decay of the shared learning
rate coefficient over training progress.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import ImageDataset
from .errors import (
    ClassCountMismatch,
    ConfigError,
    EmptyDataset,
    EmptySearchSpace,
    NonFiniteGradient,
    NonFiniteLoss,
)
from .featurespace import PartitionSpec
from .hierarchy import GranularityHierarchy
from .losses import structuralization_terms
from .network import FineOnlyNet, StructuredNet, load_checkpoint
from .objectives import (
    MODES,
    ObjectiveConfig,
    coarse_objective,
    fs_objective,
    prediction_calibration,
    total_objective,
)

DEFAULT_SEARCH_SPACE = (0.005, 0.01, 0.05, 0.1, 0.5, 1.0)
LAMBDA_ORDER = ("lambda_cs", "lambda_cd", "lambda_p")


def lr_coefficient(progress: float, start: float = 1.0, end: float = 0.1) -> float:
    """Linear decay of the learning-rate coefficient over training progress."""
    progress = min(max(progress, 0.0), 1.0)
    return start + (end - start) * progress


@dataclass
class TrainConfig:
    """Everything a training run depends on, in one serializable place.

    ``mode=None`` inherits the objective's mode; a non-None value wins
    and the objective is synced to it.
    """

    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.003
    momentum: float = 0.9
    branch_lr_multiplier: float = 10.0
    lr_coeff_start: float = 1.0
    lr_coeff_end: float = 0.1
    seed: int = 0
    mode: str | None = None
    stream: str = "dual"
    backbone: str = "smallconv"
    backbone_widths: tuple[int, ...] | None = None
    transition_channels: int = 256
    ratios: tuple[float, float, float] = (0.5, 0.3, 0.2)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    class_balanced: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 2:
            raise ConfigError("alignment statistics need batches of at least 2")
        if self.lr <= 0 or self.branch_lr_multiplier <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.mode is None:
            self.mode = self.objective.mode
        elif self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        elif self.objective.mode != self.mode:
            self.objective = replace(self.objective, mode=self.mode)

    @property
    def partition_spec(self) -> PartitionSpec:
        r_c, r_p, r_n = self.ratios
        return PartitionSpec(r_c=r_c, r_p=r_p, r_n=r_n, d=self.transition_channels)

    def build_model(self, classes_per_level: Sequence[int]) -> StructuredNet:
        kwargs = {}
        if self.backbone_widths is not None:
            kwargs["widths"] = tuple(self.backbone_widths)
        return StructuredNet(
            classes_per_level,
            stream=self.stream,
            backbone=self.backbone,
            transition_channels=self.transition_channels,
            backbone_kwargs=kwargs,
        )

    def to_dict(self) -> dict:
        obj = self.objective
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "momentum": self.momentum, "branch_lr_multiplier": self.branch_lr_multiplier,
            "lr_coeff_start": self.lr_coeff_start, "lr_coeff_end": self.lr_coeff_end,
            "seed": self.seed, "mode": self.mode, "stream": self.stream,
            "backbone": self.backbone,
            "backbone_widths": list(self.backbone_widths) if self.backbone_widths else None,
            "transition_channels": self.transition_channels,
            "ratios": list(self.ratios), "class_balanced": self.class_balanced,
            "objective": {
                "lambda_cs": obj.lambda_cs, "lambda_cd": obj.lambda_cd,
                "lambda_p": obj.lambda_p, "lambda_dec": obj.lambda_dec,
                "metric": obj.metric, "mode": obj.mode,
                "epsilon": {
                    "kind": obj.epsilon.kind, "start": obj.epsilon.start,
                    "end": obj.epsilon.end, "ramp_fraction": obj.epsilon.ramp_fraction,
                },
            },
        }


_COMMON_KEYS = ("step", "epoch", "progress", "epsilon", "lr_coeff", "l_c", "total")
_FS_KEYS = ("l_lf", "l_dec", "s_cs", "s_cd", "s_p", "skipped_cd", "skipped_p")
STEPLOG_KEYS = {
    "fsdg": _COMMON_KEYS + _FS_KEYS,
    "fgdg_lf": _COMMON_KEYS + _FS_KEYS,
    "fgdg_baseline": _COMMON_KEYS + ("l_f",),
}


class StepLog:
    """Append-only per-step training record with a fixed key set per mode."""

    def __init__(self, mode: str):
        if mode not in STEPLOG_KEYS:
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode
        self.keys = STEPLOG_KEYS[mode]
        self.records: list[dict] = []

    def append(self, **values) -> None:
        if set(values) != set(self.keys):
            missing = set(self.keys) - set(values)
            extra = set(values) - set(self.keys)
            raise ConfigError(f"step record key mismatch (missing {missing}, extra {extra})")
        self.records.append({k: values[k] for k in self.keys})

    def column(self, key: str) -> list:
        if key not in self.keys:
            raise ConfigError(f"no column {key!r} in a {self.mode} log")
        return [r[key] for r in self.records]

    def final(self, key: str):
        if not self.records:
            raise EmptyDataset("empty step log")
        return self.column(key)[-1]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"mode": self.mode, "keys": list(self.keys)}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "StepLog":
        with open(path) as fh:
            header = json.loads(fh.readline())
            log = cls(header["mode"])
            for line in fh:
                if line.strip():
                    log.append(**json.loads(line))
        return log


@dataclass
class TrainResult:
    model: StructuredNet
    steplog: StepLog
    config: TrainConfig
    hierarchy: GranularityHierarchy


def _plan_batches(
    labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """One epoch's batch index lists; trailing singletons are dropped."""
    n = labels.shape[0]
    if cfg.class_balanced:
        # Interleave per-class shuffles so every batch sees a class spread.
        by_class = [rng.permutation(np.flatnonzero(labels == k))
                    for k in np.unique(labels)]
        for lst in by_class:
            rng.shuffle(lst)
        order = np.array(
            [idx for round_ in range(max(len(c) for c in by_class))
             for c in by_class for idx in c[round_:round_ + 1]],
            dtype=np.int64,
        )
    else:
        order = rng.permutation(n)
    batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
    return [b for b in batches if b.size >= 2]


def train(
    cfg: TrainConfig,
    dataset: ImageDataset,
    hierarchy: GranularityHierarchy,
) -> TrainResult:
    """Run one full training; returns the model and its step log.

    Deterministic given ``cfg.seed``: same initialization, same batch
    order, same arithmetic, so two runs agree step-for-step and
    weight-for-weight.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.num_classes != hierarchy.num_fine:
        raise ClassCountMismatch(
            f"dataset has {dataset.num_classes} fine classes, hierarchy "
            f"{hierarchy.num_fine}"
        )

    torch.manual_seed(cfg.seed)
    model = cfg.build_model(hierarchy.classes_per_level)
    model.train()
    spec = cfg.partition_spec
    obj = cfg.objective
    mode = cfg.mode

    optimizer = torch.optim.SGD(
        [
            {"params": list(model.backbone_parameters()), "lr": cfg.lr},
            {"params": list(model.branch_parameters()), "lr": cfg.lr * cfg.branch_lr_multiplier},
        ],
        lr=cfg.lr,
        momentum=cfg.momentum,
    )
    base_lrs = [group["lr"] for group in optimizer.param_groups]

    labels_np = dataset.labels.numpy()
    coarse_np = [hierarchy.ancestors(labels_np, g) for g in range(hierarchy.levels)]
    coarse_t = [torch.from_numpy(c) for c in coarse_np]

    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB42C4]))
    epoch_plans = [_plan_batches(labels_np, cfg, batch_rng) for _ in range(cfg.epochs)]
    total_steps = sum(len(p) for p in epoch_plans)
    if total_steps == 0:
        raise EmptyDataset("batch plan is empty; dataset smaller than a usable batch")

    log = StepLog(mode)
    step = 0
    for epoch, plan in enumerate(epoch_plans):
        for batch_idx in plan:
            progress = step / max(total_steps - 1, 1)
            coeff = lr_coefficient(progress, cfg.lr_coeff_start, cfg.lr_coeff_end)
            for group, base in zip(optimizer.param_groups, base_lrs):
                group["lr"] = base * coeff
            eps = obj.epsilon.value_at(progress)

            idx = torch.from_numpy(batch_idx)
            x = dataset.images[idx]
            y = dataset.labels[idx]
            features, outputs = model(x)
            l_c = coarse_objective(outputs, [c[idx] for c in coarse_t[1:]])

            record: dict = {}
            if mode == "fsdg":
                terms = structuralization_terms(features, spec, hierarchy, y, obj.metric)
                l_lf = prediction_calibration(outputs, y, hierarchy, eps)
                l_fs = fs_objective(
                    terms.decorrelation, terms.scale_similarity,
                    terms.sibling_similarity, terms.separation, obj,
                )
                total = total_objective(
                    mode, classification=l_c, calibration=l_lf, structuralization=l_fs
                )
                record.update(_fs_record(terms, l_lf))
            elif mode == "fgdg_lf":
                l_lf = prediction_calibration(outputs, y, hierarchy, eps)
                total = total_objective(mode, classification=l_c, calibration=l_lf)
                with torch.no_grad():
                    terms = structuralization_terms(features, spec, hierarchy, y, obj.metric)
                record.update(_fs_record(terms, l_lf))
            else:  # fgdg_baseline
                total = total_objective(
                    mode, classification=l_c,
                    fine_logits=outputs.logits[0], fine_labels=y, epsilon=eps,
                )
                record["l_f"] = float((total - l_c).detach())

            if not bool(torch.isfinite(total)):
                raise NonFiniteLoss(
                    f"non-finite total at step {step} (epoch {epoch}): "
                    f"l_c={float(l_c)!r}, record={record!r}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            log.append(
                step=step, epoch=epoch, progress=progress, epsilon=eps,
                lr_coeff=coeff, l_c=float(l_c.detach()), total=float(total.detach()),
                **record,
            )
            step += 1
    return TrainResult(model=model, steplog=log, config=cfg, hierarchy=hierarchy)


def _fs_record(terms, l_lf) -> dict:
    return {
        "l_lf": float(l_lf.detach()),
        "l_dec": float(terms.decorrelation.detach()),
        "s_cs": float(terms.scale_similarity.detach()),
        "s_cd": float(terms.sibling_similarity.detach()),
        "s_p": float(terms.separation.detach()),
        "skipped_cd": terms.skipped_sibling,
        "skipped_p": terms.skipped_separation,
    }


@dataclass
class EvalResult:
    accuracy: float
    per_level: dict[int, float] | None
    n: int


def evaluate(
    model,
    dataset: ImageDataset,
    hierarchy: GranularityHierarchy | None = None,
    batch_size: int = 128,
) -> EvalResult:
    """Fine accuracy (plus per-level accuracies when a hierarchy is given).

    ``model`` may be a :class:`StructuredNet`, a pruned fine path, or a
    checkpoint path.
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    fine_classes = (
        model.classes_per_level[0] if isinstance(model, StructuredNet) else model.num_classes
    )
    if dataset.num_classes != fine_classes:
        raise ClassCountMismatch(
            f"dataset has {dataset.num_classes} fine classes, model {fine_classes}"
        )
    was_training = model.training
    model.eval()
    correct = 0
    per_level_correct: dict[int, int] | None = None
    if hierarchy is not None and isinstance(model, StructuredNet):
        per_level_correct = {g: 0 for g in range(1, model.levels)}
    with torch.no_grad():
        for x, y in dataset.batches(batch_size):
            if isinstance(model, StructuredNet):
                _, outputs = model(x)
                pred = outputs.logits[0].argmax(dim=1)
                if per_level_correct is not None:
                    for g in per_level_correct:
                        truth = torch.from_numpy(hierarchy.ancestors(y.numpy(), g))
                        per_level_correct[g] += int(
                            (outputs.logits[g].argmax(dim=1) == truth).sum()
                        )
            else:
                pred = model(x).argmax(dim=1)
            correct += int((pred == y).sum())
    if was_training:
        model.train()
    n = len(dataset)
    per_level = (
        {g: c / n for g, c in per_level_correct.items()} if per_level_correct else None
    )
    return EvalResult(accuracy=correct / n, per_level=per_level, n=n)


def weight_hash(model: torch.nn.Module) -> str:
    """SHA-256 over all state tensors in state_dict order."""
    digest = hashlib.sha256()
    for key, tensor in model.state_dict().items():
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# --- gradient checking --------------------------------------------------------


def gradient_check(
    loss_fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-4,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be a pure scalar function of the given tensors. All
    arithmetic runs in float64. The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaves = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in inputs]
    loss = loss_fn(*leaves)
    if loss.ndim != 0:
        raise ConfigError("gradient_check needs a scalar loss")
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            analytic = (torch.zeros_like(leaf) if grad is None else grad).reshape(-1)
            if not bool(torch.isfinite(analytic).all()):
                raise NonFiniteGradient("autograd produced a non-finite gradient")
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(loss_fn(*leaves))
                flat[i] = orig - step
                lo = float(loss_fn(*leaves))
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                if not math.isfinite(numeric):
                    raise NonFiniteGradient(f"non-finite finite-difference at coordinate {i}")
                a = float(analytic[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    return worst


# --- progressive coordinate search over the loss weights ----------------------


@dataclass
class GridSearchResult:
    best: dict[str, float]
    best_score: float
    table: list[dict]

    @property
    def runs(self) -> int:
        return len(self.table)


def progressive_grid_search(
    score_fn: Callable[[dict[str, float]], float],
    search_space: Iterable[float] = DEFAULT_SEARCH_SPACE,
    order: Sequence[str] = LAMBDA_ORDER,
) -> GridSearchResult:
    """Coordinate-progressive sweep of the loss weights.

    Each coefficient in ``order`` is swept over ``search_space`` while
    earlier coefficients stay at their chosen values and later ones at 0;
    its argmax is then frozen. Ties go to the smaller coefficient. Every
    evaluation is one ``score_fn`` call, so the full protocol costs
    ``len(order) * len(search_space)`` runs.
    """
    space = sorted(float(v) for v in search_space)
    if not space or not order:
        raise EmptySearchSpace("empty coefficient search space")
    chosen: dict[str, float] = {name: 0.0 for name in order}
    table: list[dict] = []
    for name in order:
        best_val, best_score = None, -math.inf
        for value in space:
            trial = dict(chosen)
            trial[name] = value
            score = float(score_fn(dict(trial)))
            table.append({"stage": name, **trial, "score": score})
            if score > best_score:
                best_val, best_score = value, score
        chosen[name] = best_val
    final_score = next(
        row["score"] for row in reversed(table)
        if all(row[k] == v for k, v in chosen.items())
    )
    return GridSearchResult(best=chosen, best_score=final_score, table=table)


def grid_search_with_training(
    base_config: TrainConfig,
    train_set: ImageDataset,
    val_set: ImageDataset,
    hierarchy: GranularityHierarchy,
    search_space: Iterable[float] = DEFAULT_SEARCH_SPACE,
    order: Sequence[str] = LAMBDA_ORDER,
) -> GridSearchResult:
    """Run the sweep with real training runs scored by held-out accuracy."""

    def score(lambdas: dict[str, float]) -> float:
        cfg = replace(
            base_config,
            mode="fsdg",
            objective=base_config.objective.with_lambdas(mode="fsdg", **lambdas),
        )
        result = train(cfg, train_set, hierarchy)
        return evaluate(result.model, val_set).accuracy

    return progressive_grid_search(score, search_space, order)
