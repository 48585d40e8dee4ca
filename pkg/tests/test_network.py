from __future__ import annotations

import pytest
import torch

from conftest import toy_hierarchy
from fsdg.errors import ConfigError, ShapeMismatch, UnavailableBranch
from fsdg.featurespace import PartitionSpec
from fsdg.network import (
    FineOnlyNet,
    StructuredNet,
    count_parameters,
    load_checkpoint,
    prune_to_fine,
    save_checkpoint,
    save_pruned_checkpoint,
)
from fsdg.objectives import ObjectiveConfig

_WIDTHS = {"widths": (4, 8, 8, 8)}


def _tiny_net(stream="dual"):
    torch.manual_seed(0)
    return StructuredNet(
        classes_per_level=(4, 2),
        stream=stream,
        transition_channels=6,
        backbone_kwargs=_WIDTHS,
    )


def test_forward_shapes_dual():
    net = _tiny_net()
    x = torch.randn(3, 3, 32, 32)
    features, outputs = net(x)
    assert [f.level for f in features] == [0, 1]
    assert features[0].values.shape == (3, 6, 16)  # 4x4 spatial grid
    assert outputs.logits[0].shape == (3, 4)
    assert outputs.logits[1].shape == (3, 2)


def test_forward_shapes_single_stream():
    net = _tiny_net(stream="single")
    x = torch.randn(2, 3, 32, 32)
    features, outputs = net(x)
    assert len(features) == 2
    assert outputs.logits[0].shape == (2, 4)


def test_single_stream_shares_backbone():
    net = _tiny_net(stream="single")
    assert net.fine_backbone is net.coarse_backbone
    dual = _tiny_net(stream="dual")
    assert dual.fine_backbone is not dual.coarse_backbone


def test_rejects_tiny_images():
    net = _tiny_net()
    with pytest.raises(ShapeMismatch):
        net(torch.randn(1, 3, 4, 4))
    with pytest.raises(ShapeMismatch):
        net(torch.randn(1, 1, 32, 32))


def test_rejects_bad_configuration():
    with pytest.raises(ConfigError):
        StructuredNet(classes_per_level=(4,), transition_channels=6)
    with pytest.raises(ConfigError):
        StructuredNet(classes_per_level=(4, 2), stream="triple")
    with pytest.raises(ConfigError):
        StructuredNet(classes_per_level=(4, 2), backbone="vit")


def test_head_init_is_small_uniform():
    net = _tiny_net()
    for head in net.heads:
        assert float(head.fc.weight.detach().abs().max()) <= 0.01
        assert torch.equal(head.fc.bias.detach(), torch.zeros_like(head.fc.bias))


def test_fine_accessors_match_forward():
    net = _tiny_net().eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        features, outputs = net(x)
        pooled = net.fine_pooled_features(x)
    assert torch.allclose(pooled, features[0].values.mean(dim=2), atol=1e-6)
    w = net.fine_classifier_weights()
    assert w.shape == (4, 6)
    with torch.no_grad():
        logits = pooled @ w.T + net.heads[0].fc.bias
    assert torch.allclose(logits, outputs.logits[0], atol=1e-5)


def test_parameter_groups_are_disjoint_and_complete():
    net = _tiny_net()
    backbone = {id(p) for p in net.backbone_parameters()}
    branch = {id(p) for p in net.branch_parameters()}
    assert not backbone & branch
    assert backbone | branch == {id(p) for p in net.parameters()}


def test_prune_matches_fine_logits_exactly():
    net = _tiny_net().eval()
    pruned = prune_to_fine(net)
    assert isinstance(pruned, FineOnlyNet)
    x = torch.randn(4, 3, 32, 32)
    with torch.no_grad():
        _, outputs = net(x)
        fine = pruned(x)
    assert float((fine - outputs.logits[0]).abs().max()) == 0.0


def test_pruned_parameter_count_is_the_fine_path():
    net = _tiny_net()
    pruned = prune_to_fine(net)
    fine_path = (
        count_parameters(net.fine_backbone)
        + count_parameters(net.transitions[0])
        + count_parameters(net.heads[0])
    )
    assert count_parameters(pruned) == fine_path
    assert count_parameters(pruned) < count_parameters(net)


def test_pruned_net_has_no_coarse_branch():
    pruned = prune_to_fine(_tiny_net())
    with pytest.raises(UnavailableBranch):
        pruned.coarse_logits(torch.randn(1, 3, 32, 32))


def test_checkpoint_round_trip(tmp_path):
    net = _tiny_net()
    path = tmp_path / "model.pt"
    save_checkpoint(
        path, net,
        hierarchy=toy_hierarchy(),
        partition=PartitionSpec(d=6, r_c=0.5, r_p=0.3, r_n=0.2),
        objective=ObjectiveConfig(),
        seed=7,
    )
    loaded, meta = load_checkpoint(path)
    assert isinstance(loaded, StructuredNet)
    assert meta["seed"] == 7
    assert meta["partition"]["d"] == 6
    assert meta["format_version"] == 1
    x = torch.randn(2, 3, 32, 32)
    net.eval()
    with torch.no_grad():
        _, a = net(x)
        _, b = loaded(x)
    assert torch.equal(a.logits[0], b.logits[0])


def test_pruned_checkpoint_round_trip(tmp_path):
    net = _tiny_net().eval()
    pruned = prune_to_fine(net)
    path = tmp_path / "fine.pt"
    save_pruned_checkpoint(path, pruned, net, seed=3,
                           partition=PartitionSpec(d=6),
                           objective=ObjectiveConfig())
    loaded, meta = load_checkpoint(path)
    assert isinstance(loaded, FineOnlyNet)
    assert meta["pruned"] is True
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        _, full = net(x)
        fine = loaded(x)
    assert torch.allclose(fine, full.logits[0], atol=0)


def test_checkpoint_rejects_future_version(tmp_path):
    net = _tiny_net()
    path = tmp_path / "model.pt"
    save_checkpoint(path, net, seed=0, partition=PartitionSpec(d=6),
                    objective=ObjectiveConfig())
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path)
