"""Multi-branch network: backbones, transition layers, and branch heads.

The classifier is one backbone per feature stream (a fine stream and a
coarse stream, optionally shared), one 1x1-conv transition per
granularity level mapping backbone channels to the partitioned width
``d``, and one linear head per level on globally pooled transitions.
Inference only ever needs the fine path; :func:`prune_to_fine` carves it
out with exact logit parity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from .errors import (
    ConfigError,
    ShapeMismatch,
    UnavailableBranch,
)
from .featurespace import FeatureMap
from .objectives import BranchOutputs

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    """What a backbone builder promises: its name and output width."""

    name: str
    out_channels: int


class SmallConvBackbone(nn.Module):
    """Four 3x3 conv stages with BN+ReLU, strides (1, 2, 2, 2).

    Default widths (32, 64, 128, 256) turn a 32x32 image into a 4x4 map
    with 256 channels — enough texture for desk-scale experiments while
    staying cheap on a CPU.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError(f"expected 4 stage widths, got {len(widths)}")
        strides = (1, 2, 2, 2)
        layers: list[nn.Module] = []
        prev = in_channels
        for width, stride in zip(widths, strides):
            layers += [
                nn.Conv2d(prev, width, kernel_size=3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.stages = nn.Sequential(*layers)
        self.widths = tuple(int(w) for w in widths)
        self.out_channels = self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


BACKBONES: dict[str, Callable[..., nn.Module]] = {
    "smallconv": SmallConvBackbone,
}


def build_backbone(name: str, **kwargs) -> nn.Module:
    if name not in BACKBONES:
        raise ConfigError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name](**kwargs)


def backbone_spec(name: str, **kwargs) -> BackboneSpec:
    """Resolve a registered backbone's promised output width."""
    return BackboneSpec(name=name, out_channels=build_backbone(name, **kwargs).out_channels)


class TransitionLayer(nn.Module):
    """1x1 conv + BN + ReLU mapping backbone channels onto the partitioned width."""

    def __init__(self, in_channels: int, out_channels: int = 256):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


class BranchHead(nn.Module):
    """Global average pool followed by a linear classifier."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)
        nn.init.uniform_(self.fc.weight, -0.01, 0.01)
        nn.init.zeros_(self.fc.bias)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.mean(dim=(2, 3)))


def _check_images(x: torch.Tensor, in_channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != in_channels:
        raise ShapeMismatch(
            f"expected (B, {in_channels}, H, W) images, got {tuple(x.shape)}"
        )
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise ShapeMismatch("images must be at least 8x8 for three stride-2 stages")


class StructuredNet(nn.Module):
    """Fine + coarse streams with one transition/head per granularity level.

    ``stream="dual"`` gives the fine level its own backbone; ``"single"``
    shares one backbone across all levels (cheaper, used in ablations).
    """

    def __init__(
        self,
        classes_per_level: Sequence[int],
        stream: str = "dual",
        backbone: str = "smallconv",
        transition_channels: int = 256,
        backbone_kwargs: dict | None = None,
    ):
        super().__init__()
        if stream not in ("dual", "single"):
            raise ConfigError(f"unknown stream layout {stream!r}")
        if len(classes_per_level) < 2:
            raise ConfigError("need at least two granularity levels")
        self.classes_per_level = tuple(int(k) for k in classes_per_level)
        self.stream = stream
        self.backbone_name = backbone
        self.backbone_kwargs = dict(backbone_kwargs or {})
        self.transition_channels = transition_channels

        self.fine_backbone = build_backbone(backbone, **self.backbone_kwargs)
        if stream == "dual":
            self.coarse_backbone = build_backbone(backbone, **self.backbone_kwargs)
        else:
            self.coarse_backbone = self.fine_backbone
        width = self.fine_backbone.out_channels
        self.transitions = nn.ModuleList(
            TransitionLayer(width, transition_channels) for _ in self.classes_per_level
        )
        self.heads = nn.ModuleList(
            BranchHead(transition_channels, k) for k in self.classes_per_level
        )
        self._in_channels = self.backbone_kwargs.get("in_channels", 3)

    @property
    def levels(self) -> int:
        return len(self.classes_per_level)

    def forward(self, x: torch.Tensor) -> tuple[list[FeatureMap], BranchOutputs]:
        _check_images(x, self._in_channels)
        fine_stream = self.fine_backbone(x)
        coarse_stream = fine_stream if self.stream == "single" else self.coarse_backbone(x)
        features: list[FeatureMap] = []
        logits: list[torch.Tensor] = []
        for g in range(self.levels):
            base = fine_stream if g == 0 else coarse_stream
            t = self.transitions[g](base)
            features.append(FeatureMap.from_spatial(t, level=g))
            logits.append(self.heads[g](t))
        return features, BranchOutputs(logits)

    def fine_pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, d) globally pooled fine-transition activations."""
        _check_images(x, self._in_channels)
        return self.transitions[0](self.fine_backbone(x)).mean(dim=(2, 3))

    def fine_classifier_weights(self) -> torch.Tensor:
        """(K_0, d) weight matrix of the fine head."""
        return self.heads[0].fc.weight

    def backbone_parameters(self) -> Iterable[nn.Parameter]:
        seen: set[int] = set()
        for module in (self.fine_backbone, self.coarse_backbone):
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    yield p

    def branch_parameters(self) -> Iterable[nn.Parameter]:
        yield from self.transitions.parameters()
        yield from self.heads.parameters()


class FineOnlyNet(nn.Module):
    """The pruned inference path: fine backbone, fine transition, fine head."""

    def __init__(self, backbone: nn.Module, transition: TransitionLayer, head: BranchHead,
                 in_channels: int = 3):
        super().__init__()
        self.backbone = backbone
        self.transition = transition
        self.head = head
        self.num_classes = head.num_classes
        self._in_channels = in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self._in_channels)
        return self.head(self.transition(self.backbone(x)))

    def fine_pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self._in_channels)
        return self.transition(self.backbone(x)).mean(dim=(2, 3))

    def fine_classifier_weights(self) -> torch.Tensor:
        return self.head.fc.weight

    def coarse_logits(self, x: torch.Tensor, level: int = 1) -> torch.Tensor:
        raise UnavailableBranch("coarse branches were pruned away")


def prune_to_fine(model: StructuredNet) -> FineOnlyNet:
    """Carve out the fine path with identical (eval-mode) logits.

    Modules are deep-copied so the pruned model is independent of the
    original; batch-norm running statistics come along, and the result is
    left in eval mode, which is the only mode inference parity is defined
    for.
    """
    import copy

    pruned = FineOnlyNet(
        backbone=copy.deepcopy(model.fine_backbone),
        transition=copy.deepcopy(model.transitions[0]),
        head=copy.deepcopy(model.heads[0]),
        in_channels=model._in_channels,
    )
    pruned.eval()
    return pruned


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- checkpointing -----------------------------------------------------------


def _arch_payload(model: StructuredNet | FineOnlyNet) -> dict:
    if isinstance(model, StructuredNet):
        return {
            "kind": "structured",
            "classes_per_level": list(model.classes_per_level),
            "stream": model.stream,
            "backbone": model.backbone_name,
            "backbone_kwargs": dict(model.backbone_kwargs),
            "transition_channels": model.transition_channels,
        }
    if isinstance(model, FineOnlyNet):
        arch = getattr(model, "_arch", None)
        if arch is None:
            raise ConfigError("pruned model lacks provenance; save it via its parent")
        return arch
    raise ConfigError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(
    path: str | Path,
    model: StructuredNet,
    *,
    hierarchy=None,
    partition=None,
    objective=None,
    train_config: dict | None = None,
    seed: int | None = None,
    pruned: bool = False,
) -> None:
    """Write a self-describing training artifact.

    Stores the architecture recipe, weights, the channel partition, the
    objective configuration, the hierarchy (content and hash), and the
    seed — enough to rebuild the model and rerun the analysis pipeline
    without the original script.
    """
    payload: dict = {
        "format_version": CHECKPOINT_VERSION,
        "arch": _arch_payload(model),
        "pruned": bool(pruned),
        "state_dict": model.state_dict(),
        "seed": seed,
        "train_config": train_config,
    }
    if partition is not None:
        payload["partition"] = {
            "r_c": partition.r_c, "r_p": partition.r_p, "r_n": partition.r_n,
            "d": partition.d,
        }
    if objective is not None:
        payload["objective"] = {
            "lambda_cs": objective.lambda_cs,
            "lambda_cd": objective.lambda_cd,
            "lambda_p": objective.lambda_p,
            "lambda_dec": objective.lambda_dec,
            "metric": objective.metric,
            "mode": objective.mode,
            "epsilon": {
                "kind": objective.epsilon.kind,
                "start": objective.epsilon.start,
                "end": objective.epsilon.end,
                "ramp_fraction": objective.epsilon.ramp_fraction,
            },
        }
    if hierarchy is not None:
        payload["hierarchy"] = {
            "classes_per_level": list(hierarchy.classes_per_level),
            "parent_maps": [list(pm) for pm in hierarchy.parent_maps],
            "hash": hierarchy.content_hash(),
        }
    torch.save(payload, Path(path))


def save_pruned_checkpoint(path: str | Path, pruned: FineOnlyNet, parent: StructuredNet,
                           **meta) -> None:
    payload_arch = {
        "kind": "fine_only",
        "classes_per_level": list(parent.classes_per_level),
        "backbone": parent.backbone_name,
        "backbone_kwargs": dict(parent.backbone_kwargs),
        "transition_channels": parent.transition_channels,
    }
    pruned._arch = payload_arch
    save_checkpoint(path, pruned, pruned=True, **meta)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint format {version!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    arch = payload["arch"]
    if arch["kind"] == "structured":
        model: nn.Module = StructuredNet(
            arch["classes_per_level"],
            stream=arch["stream"],
            backbone=arch["backbone"],
            transition_channels=arch["transition_channels"],
            backbone_kwargs=arch.get("backbone_kwargs") or {},
        )
    elif arch["kind"] == "fine_only":
        full = StructuredNet(
            arch["classes_per_level"],
            backbone=arch["backbone"],
            transition_channels=arch["transition_channels"],
            backbone_kwargs=arch.get("backbone_kwargs") or {},
        )
        model = FineOnlyNet(
            backbone=full.fine_backbone,
            transition=full.transitions[0],
            head=full.heads[0],
            in_channels=full._in_channels,
        )
        model._arch = dict(arch)
    else:
        raise ConfigError(f"unknown checkpoint architecture {arch['kind']!r}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta
