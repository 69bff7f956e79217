import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctan import ops
from ctan.backbone import BackboneConfig, StageConfig, classify_action, extract_features, init_model
from ctan.data import ClipSet, SegmentRecord
from ctan.optim import SGD
from ctan.tensor import NonFiniteError, Tensor, backward
from ctan.trainer import (Datasets, TrainConfig, accuracy_from_logits, evaluate, lambda_schedule,
                          metrics_csv, train, train_step)

CFG = BackboneConfig(stages=(StageConfig(4), StageConfig(8), StageConfig(8)), frames=16, height=6, width=6,
                     hidden_action=8, hidden_domain=8)


def clipset(n, seed, domain=1, num_classes=3, size=7):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    records = [SegmentRecord(f"v{seed}_{i}", 0, int(labels[i]), domain) for i in range(n)]
    return ClipSet(rng.uniform(0, 1, (n, 16, 1, size, size)).astype(np.float32), labels,
                   np.full(n, domain), records, 6)


def data(n=6):
    return Datasets(clipset(n, 1), clipset(n, 2, domain=0), clipset(4, 3, domain=0))


def test_lambda_schedule_values():
    assert lambda_schedule(0.0).lam == 0.0
    assert lambda_schedule(1.0).lam == pytest.approx(2 / (1 + math.exp(-10)) - 1, abs=1e-15)
    assert 0.9999 < lambda_schedule(1.0).lam < 1.0
    with pytest.raises(ValueError):
        lambda_schedule(1.01)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 50))
def test_lambda_schedule_is_monotone(a, b, gamma):
    lo, hi = sorted((a, b))
    assert lambda_schedule(lo, gamma).lam <= lambda_schedule(hi, gamma).lam


def test_init_domain_loss_is_near_log_two():
    d = data(8)
    for seed in range(5):
        bundle = init_model(CFG, 3, seed)
        opt = SGD(bundle.params, 1e-3)
        xs = d.source_train.batch(range(8), False)
        xt = d.target_train.batch(range(8), False)
        out = train_step(bundle, opt, xs, d.source_train.labels, xt, 0.0)
        assert abs(out.l_domain - math.log(2)) < 0.2


def test_zero_lambda_step_equals_supervised_step():
    d = data(6)
    xs, xt, ys = d.source_train.batch(range(6), False), d.target_train.batch(range(6), False), d.source_train.labels
    a = init_model(CFG, 3, 0, dtype=np.float64)
    b = a.clone()
    domain = a.names("domain.")
    train_step(a, SGD(a.params, 0.1, 0.9, 5e-4), Tensor(xs.data, dtype=np.float64), ys,
               Tensor(xt.data, dtype=np.float64), 0.0, frozen=domain)
    # supervised oracle: cross-entropy only, domain head untouched
    action_path = {k: v for k, v in b.params.items() if k not in domain}
    logits = classify_action(extract_features(Tensor(xs.data, dtype=np.float64), b, True), b, True)
    backward(ops.softmax_cross_entropy(logits, ys))
    SGD(action_path, 0.1, 0.9, 5e-4).step()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_zero_lambda_still_trains_the_discriminator():
    d = data(6)
    bundle = init_model(CFG, 3, 0)
    before = {k: v.data.copy() for k, v in bundle.params.items()}
    train_step(bundle, SGD(bundle.params, 0.1), d.source_train.batch(range(6), False), d.source_train.labels,
               d.target_train.batch(range(6), False), 0.0)
    assert all(not np.array_equal(before[k], bundle.params[k].data) for k in bundle.names("domain."))


def test_loss_accounting():
    d = data(6)
    bundle = init_model(CFG, 3, 4, dtype=np.float64)
    probe = bundle.clone()
    xs = Tensor(d.source_train.batch(range(6), False).data, dtype=np.float64)
    xt = Tensor(d.target_train.batch(range(6), False).data, dtype=np.float64)
    out = train_step(bundle, SGD(bundle.params, 0.01), xs, d.source_train.labels, xt, 0.4)
    # replay the step's dropout draws from the pre-step generator state
    probe_rng = init_model(CFG, 3, 4, dtype=np.float64).rng
    logits = classify_action(extract_features(xs, probe, True), probe, True, rng=probe_rng).data
    recomputed = ops.softmax_cross_entropy(Tensor(logits), d.source_train.labels).item()
    assert out.l_task == pytest.approx(recomputed, abs=1e-6)
    assert out.total == pytest.approx(out.l_task - 0.4 * out.l_domain)
    assert out.l_task >= 0 and out.l_domain >= 0 and out.count == 6


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_aborts():
    d = data(4)
    bundle = init_model(CFG, 3, 0)
    bundle.params["action.fc2.bias"] = Tensor(np.array([3e38, -3e38, 0], np.float32), requires_grad=True)
    with pytest.raises(NonFiniteError):
        train_step(bundle, SGD(bundle.params, 0.1), d.source_train.batch(range(4), False), [1, 1, 1, 1],
                   d.target_train.batch(range(4), False), 0.0)


def test_two_rows_for_one_epoch_each():
    d = data(4)
    res = train(init_model(CFG, 3, 0), d, TrainConfig(batch_size=2, stage1_epochs=1, stage2_epochs=1))
    assert [(m.epoch, m.stage) for m in res.metrics] == [(1, 1), (2, 2)]
    assert res.metrics[0].lam == 0.0 and res.metrics[1].lam > 0
    assert set(res.stage_bundles) == {1, 2}
    lines = metrics_csv(res.metrics).splitlines()
    assert lines[0] == "epoch,stage,lambda,l_task,l_domain,source_acc,target_val_acc" and len(lines) == 3
    assert all(len(f.split(".")[1]) == 6 for f in lines[1].split(",")[2:])


def test_lambda_ramps_within_stage_two_only():
    d = data(4)
    res = train(init_model(CFG, 3, 0), d, TrainConfig(batch_size=2, stage1_epochs=2, stage2_epochs=2))
    lams = [s.lambda_v for s in res.steps]
    assert lams[:4] == [0.0] * 4 and lams[4] == 0.0
    assert lams[4:] == sorted(lams[4:]) and lams[-1] == pytest.approx(lambda_schedule(1.0).lam)


def test_source_only_skips_stage_two_and_matches_stage1_only():
    d = data(4)
    a = train(init_model(CFG, 3, 0), d, TrainConfig(batch_size=2, stage1_epochs=2, source_only=True))
    b = train(init_model(CFG, 3, 0), d, TrainConfig(batch_size=2, stage1_epochs=2, stage2_epochs=0))
    assert len(a.metrics) == 2 and set(a.stage_bundles) == {1}
    for k in a.bundle.params:
        np.testing.assert_array_equal(a.bundle.params[k].data, b.bundle.params[k].data)


def test_training_is_deterministic():
    d = data(4)
    cfg = TrainConfig(batch_size=2, stage1_epochs=1, stage2_epochs=1, seed=3)
    a = train(init_model(CFG, 3, 0), d, cfg)
    b = train(init_model(CFG, 3, 0), d, cfg)
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    assert a.steps == b.steps
    for k in a.bundle.params:
        assert a.bundle.params[k].data.tobytes() == b.bundle.params[k].data.tobytes()


def test_target_labels_are_never_read():
    d = data(4)
    scrambled = Datasets(d.source_train, clipset(4, 2, domain=0), d.target_val)
    scrambled.target_train.labels[:] = [2, 0, 1, 2]
    cfg = TrainConfig(batch_size=2, stage1_epochs=1, stage2_epochs=1)
    a = train(init_model(CFG, 3, 0), Datasets(d.source_train, d.target_train), cfg)
    b = train(init_model(CFG, 3, 0), Datasets(scrambled.source_train, scrambled.target_train), cfg)
    assert a.steps == b.steps


def test_evaluate_examples():
    bundle = init_model(CFG, 3, 0)
    bundle.params["action.fc2.weight"] = Tensor(np.zeros((3, 8), np.float32), requires_grad=True)
    bundle.params["action.fc2.bias"] = Tensor(np.array([1.0, 0.0, 0.0], np.float32), requires_grad=True)
    zeros = clipset(3, 5)
    zeros.labels[:] = 0
    assert evaluate(bundle, zeros) == 1.0
    zeros.labels[:] = 1
    assert evaluate(bundle, zeros) == 0.0


def test_accuracy_from_hand_logits_and_ties():
    logits = np.array([[2.0, 1.0, 0.0], [0.0, 3.0, 3.0], [1.0, 1.0, 1.0], [0.0, 0.0, 5.0]])
    # argmax: 0, 1 (tie -> lowest), 0 (tie), 2
    assert accuracy_from_logits(logits, [0, 1, 1, 2]) == 0.75
    with pytest.raises(ValueError):
        accuracy_from_logits(np.zeros((0, 3)), [])


def test_invalid_config():
    for kw in ({"batch_size": 0}, {"lr_stage1": 0.0}, {"stage2_epochs": -1}, {"domain_lr_scale": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()
