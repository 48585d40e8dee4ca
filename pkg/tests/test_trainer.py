from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from conftest import toy_hierarchy
from fsdg.data import ImageDataset
from fsdg.errors import (
    ClassCountMismatch,
    ConfigError,
    EmptyDataset,
    EmptySearchSpace,
)
from fsdg.synthdata import SynthSpec, STUDIO, generate
from fsdg.trainer import (
    StepLog,
    TrainConfig,
    _plan_batches,
    evaluate,
    gradient_check,
    grid_search_with_training,
    lr_coefficient,
    progressive_grid_search,
    train,
    weight_hash,
)


def _tiny_dataset(n_per_class=6, num_classes=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    images = rng.random((n, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return ImageDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels),
        num_classes=num_classes,
        domain="noise",
    )


def _tiny_config(mode="fsdg", **kw):
    defaults = dict(
        epochs=2, batch_size=8, seed=0, mode=mode,
        transition_channels=8, backbone_widths=(4, 8, 8, 8),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_lr_coefficient_linear_endpoints():
    assert lr_coefficient(0.0) == 1.0
    assert abs(lr_coefficient(1.0) - 0.1) < 1e-12
    assert abs(lr_coefficient(0.5) - 0.55) < 1e-12


def test_train_config_syncs_mode_into_objective():
    cfg = _tiny_config(mode="fgdg_lf")
    assert cfg.objective.mode == "fgdg_lf"
    assert cfg.mode == "fgdg_lf"


def test_train_config_partition_spec_uses_ratios():
    cfg = _tiny_config(ratios=(0.5, 0.3, 0.2), transition_channels=10)
    assert cfg.partition_spec.counts == (5, 3, 2)


def test_train_config_rejects_tiny_batches():
    with pytest.raises(ConfigError):
        _tiny_config(batch_size=1)


def test_plan_batches_covers_every_sample_once():
    labels = np.repeat(np.arange(4), 8)
    cfg = _tiny_config(batch_size=8)
    rng = np.random.default_rng(0)
    batches = _plan_batches(labels, cfg, rng)
    seen = np.sort(np.concatenate(batches))
    assert seen.tolist() == list(range(32))
    assert all(len(b) >= 2 for b in batches)


def test_plan_batches_drops_remainders_below_two():
    labels = np.arange(9)  # batch_size 4 -> 4 + 4 + dangling single
    cfg = _tiny_config(batch_size=4)
    batches = _plan_batches(labels, cfg, np.random.default_rng(1))
    assert sorted(len(b) for b in batches) == [4, 4]


def test_plan_batches_class_balanced_interleaves():
    labels = np.repeat(np.arange(4), 8)
    cfg = _tiny_config(batch_size=8, class_balanced=True)
    batches = _plan_batches(labels, cfg, np.random.default_rng(2))
    # every batch should mix several classes
    for batch in batches:
        assert len(np.unique(labels[batch])) >= 3


def test_steplog_enforces_mode_keys():
    log = StepLog("fgdg_baseline")
    with pytest.raises(ConfigError):
        log.append(step=0)
    record = {k: 0.0 for k in
              ("step", "epoch", "progress", "epsilon", "lr_coeff", "l_c", "l_f", "total")}
    log.append(**record)
    assert log.final("step") == 0.0
    assert log.column("l_f") == [0.0]
    with pytest.raises(ConfigError):
        log.column("s_cs")


def test_steplog_jsonl_round_trip(tmp_path):
    log = StepLog("fgdg_baseline")
    record = {k: float(i) for i, k in enumerate(
        ("step", "epoch", "progress", "epsilon", "lr_coeff", "l_c", "l_f", "total"))}
    log.append(**record)
    path = tmp_path / "log.jsonl"
    log.to_jsonl(path)
    loaded = StepLog.from_jsonl(path)
    assert loaded.mode == "fgdg_baseline"
    assert loaded.records == [record]


def test_train_rejects_empty_or_mismatched_data(toy_h):
    cfg = _tiny_config()
    empty = _tiny_dataset().subset(np.array([], dtype=np.int64))
    with pytest.raises(EmptyDataset):
        train(cfg, empty, toy_h)
    bad = _tiny_dataset(num_classes=5)
    with pytest.raises(ClassCountMismatch):
        train(cfg, bad, toy_h)


def test_train_smoke_fsdg_records_all_quantities(toy_h):
    res = train(_tiny_config("fsdg"), _tiny_dataset(), toy_h)
    final = res.steplog.records[-1]
    for key in ("l_c", "l_lf", "l_dec", "s_cs", "s_cd", "s_p", "total"):
        assert math.isfinite(final[key])
    assert final["epoch"] == 1
    assert res.steplog.column("progress")[-1] == 1.0
    # epsilon ramps from 0 toward 1 over the first half
    eps = res.steplog.column("epsilon")
    assert eps[0] == 0.0 and eps[-1] == 1.0


def test_train_smoke_baseline_has_no_structural_keys(toy_h):
    res = train(_tiny_config("fgdg_baseline"), _tiny_dataset(), toy_h)
    final = res.steplog.records[-1]
    assert "s_cs" not in final and "l_f" in final


def test_train_is_deterministic(toy_h):
    data = _tiny_dataset()
    a = train(_tiny_config("fsdg"), data, toy_h)
    b = train(_tiny_config("fsdg"), data, toy_h)
    assert weight_hash(a.model) == weight_hash(b.model)
    assert a.steplog.records == b.steplog.records


def test_evaluate_scores_memorized_model():
    spec = SynthSpec(classes_per_level=(4, 2), samples_per_class=8,
                     domains=(STUDIO,), seed=1)
    datasets, h = generate(spec)
    data = datasets["studio"]
    cfg = _tiny_config("fgdg_baseline", epochs=25, batch_size=8)
    res = train(cfg, data, h)
    result = evaluate(res.model, data, h)
    assert result.n == len(data)
    assert result.accuracy > 0.5  # trained to memorize a tiny clean set
    assert set(result.per_level) == {1}  # coarse branches only; fine is .accuracy
    assert 0.0 <= result.per_level[1] <= 1.0


def test_evaluate_rejects_class_mismatch(toy_h):
    res = train(_tiny_config("fgdg_baseline"), _tiny_dataset(), toy_h)
    with pytest.raises(ClassCountMismatch):
        evaluate(res.model, _tiny_dataset(num_classes=5))


def test_gradient_check_accepts_analytic_quadratic():
    def loss_fn(a, b):
        return (a * a).sum() + (a * b).sum()

    torch.manual_seed(0)
    inputs = [torch.randn(3, 2, dtype=torch.float64) for _ in range(2)]
    worst = gradient_check(loss_fn, inputs)
    assert worst < 1e-6


def test_gradient_check_flags_wrong_gradient():
    class Broken(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x * x).sum()

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return grad * 3.0 * x  # should be 2x

    worst = gradient_check(lambda x: Broken.apply(x), [torch.randn(4, dtype=torch.float64)])
    assert worst > 1e-2


def test_progressive_grid_search_protocol():
    calls = []

    def score(cfg):
        calls.append(dict(cfg))
        # favor 0.05 for cs, 0.5 for cd, 0.01 for p
        target = {"lambda_cs": 0.05, "lambda_cd": 0.5, "lambda_p": 0.01}
        return -sum(abs(cfg[k] - v) for k, v in target.items())

    result = progressive_grid_search(score)
    assert len(calls) == 18
    # stage 1 sweeps lambda_cs with the later coefficients parked at zero
    assert all(c["lambda_cd"] == 0.0 and c["lambda_p"] == 0.0 for c in calls[:6])
    # stage 2 fixes the winning lambda_cs
    assert all(c["lambda_cs"] == 0.05 for c in calls[6:12])
    assert all(c["lambda_p"] == 0.0 for c in calls[6:12])
    # stage 3 fixes both winners
    assert all(c["lambda_cs"] == 0.05 and c["lambda_cd"] == 0.5 for c in calls[12:])
    assert result.best == {"lambda_cs": 0.05, "lambda_cd": 0.5, "lambda_p": 0.01}
    assert len(result.table) == 18


def test_progressive_grid_search_ties_prefer_smaller():
    result = progressive_grid_search(lambda cfg: 0.0)
    assert result.best == {"lambda_cs": 0.005, "lambda_cd": 0.005, "lambda_p": 0.005}


def test_progressive_grid_search_rejects_empty_space():
    with pytest.raises(EmptySearchSpace):
        progressive_grid_search(lambda cfg: 0.0, search_space=())


def test_grid_search_with_training_scores_by_validation(toy_h):
    spec = SynthSpec(classes_per_level=(4, 2), samples_per_class=4,
                     domains=(STUDIO,), seed=3)
    datasets, h = generate(spec)
    data = datasets["studio"]
    cfg = _tiny_config("fsdg", epochs=1, batch_size=8)
    result = grid_search_with_training(cfg, data, data, h, search_space=(0.05,))
    assert len(result.table) == 3
    assert set(result.best) == {"lambda_cs", "lambda_cd", "lambda_p"}
    assert 0.0 <= result.best_score <= 1.0
