import json
import math

import numpy as np
import pytest

from laconv import synth
from laconv import tensor as T
from laconv.net import LaConvNet, NetConfig, StageConfig
from laconv.train import (AdamState, Dataset, NonFiniteLoss, TrainConfig, accuracy_by_kind, adam_step, build_vocab,
                          clip_grad_norm, evaluate, fit, lr_schedule, random_baseline, train_epoch)

SMALL = NetConfig("small", 64, 8, (StageConfig(8, 3, 2, 4, 1), StageConfig(8, 3, 2, 2, 1), StageConfig(8, 3, 2, 1, 1)),
                  text_dim=8, embed_dim=8)
VOCAB = build_vocab(synth.vocabulary_tokens())


@pytest.fixture(scope="module")
def data16():
    return Dataset(synth.generate(16, "train", 0)[0], VOCAB)


def run_epochs(data, epochs, lr0=3e-3, batch_size=16, seed=0):
    model = LaConvNet(SMALL, len(VOCAB), seed=seed)
    cfg = TrainConfig(lr0=lr0, epochs=epochs, warmup_epochs=0, batch_size=batch_size, seed=seed)
    per = math.ceil(len(data) / batch_size)
    state, rng, step, hist = AdamState(), np.random.default_rng(seed), 0, []
    for _ in range(epochs):
        m, step = train_epoch(model, data, cfg, state, rng, step, epochs * per, 0)
        hist.append(m)
    return model, hist


def snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


# schedule

def test_schedule_endpoints():
    # toy run: 313 steps per epoch, 3 warmup epochs, 40 epochs
    warm, total = 3 * 313, 40 * 313
    assert lr_schedule(warm, total, warm, 1e-4) == 1e-4
    assert lr_schedule(total, total, warm, 1e-4) < 1e-12
    assert lr_schedule(0, total, warm, 1e-4) == 0.0
    assert lr_schedule(55, 100, 10, 1e-4) == pytest.approx(5e-5, abs=1e-15)


def test_schedule_shape():
    lrs = [lr_schedule(s, 100, 10, 1.0) for s in range(101)]
    assert np.all(np.diff(lrs[:11]) > 0) and np.all(np.diff(lrs[10:]) < 0)
    assert lr_schedule(50, 50, 0, 1.0) < 1e-12


# optimizer

def test_adam_zero_grad_leaves_params():
    p = {"w": T.Tensor(np.arange(4.0))}
    state = AdamState()
    adam_step(p, {"w": np.zeros(4)}, state, 0.1)
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))
    state.m["w"][:] = 1.0
    adam_step(p, {"w": np.zeros(4)}, state, 0.0)
    np.testing.assert_array_equal(state.m["w"], 0.9)


def test_adam_first_step_moves_by_lr():
    p = {"w": T.Tensor(np.zeros(3))}
    adam_step(p, {"w": np.array([0.5, -2.0, 1e-3])}, AdamState(), 0.01)
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(T.ShapeError):
        adam_step({"w": T.Tensor(np.zeros(3))}, {"w": np.zeros(4)}, AdamState(), 0.1)


def test_clip_preserves_direction():
    rng = np.random.default_rng(0)
    grads = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    before = {k: v.copy() for k, v in grads.items()}
    norm = clip_grad_norm(grads, 1.0)
    ratio = grads["a"] / before["a"]
    assert norm > 1.0 and np.all(ratio > 0)
    np.testing.assert_allclose(ratio, ratio.flat[0])
    np.testing.assert_allclose(grads["b"] / before["b"], ratio.flat[0])
    assert math.sqrt(sum((g ** 2).sum() for g in grads.values())) == pytest.approx(1.0)
    small = {"a": np.full(2, 0.1)}
    clip_grad_norm(small, 1.0)
    np.testing.assert_array_equal(small["a"], 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# epochs

def test_zero_lr_keeps_params(data16):
    model = LaConvNet(SMALL, len(VOCAB), seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    cfg = TrainConfig(lr0=1e-3, epochs=2, warmup_epochs=1, batch_size=8)
    # step 0 of the warmup has lr 0; pass step=-1 so the single batch gets it
    train_epoch(model, Dataset(data16.examples[:8], VOCAB), cfg, AdamState(), np.random.default_rng(0), -1, 10, 5)
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n], err_msg=n)


def test_memorization(data16):
    _, hist = run_epochs(data16, 50)
    losses = [h["loss"] for h in hist]
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 45
    assert losses[-1] < 0.2 and hist[-1]["accuracy"] == 1.0


def test_reported_accuracy_matches_recount(data16):
    model = LaConvNet(SMALL, len(VOCAB), seed=3)
    cfg = TrainConfig(lr0=1e-3, epochs=2, warmup_epochs=1, batch_size=16)
    m, _ = train_epoch(model, data16, cfg, AdamState(), np.random.default_rng(0), -1, 10, 5)
    # one full batch at lr 0: the train-mode logits are what the epoch scored
    logits = model(T.Tensor(data16.images), data16.ids).data
    assert m["accuracy"] == np.mean(logits.argmax(-1) == data16.targets)
    model.eval()
    pred = model(T.Tensor(data16.images), data16.ids).data.argmax(-1)
    assert evaluate(model, data16)["acc"] == np.mean(pred == data16.targets)


def test_training_is_deterministic(data16):
    a, ha = run_epochs(data16, 3, batch_size=8)
    b, hb = run_epochs(data16, 3, batch_size=8)
    assert ha == hb
    sa, sb = a.state_dict(), b.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_evaluate_has_no_side_effects(data16):
    model, _ = run_epochs(data16, 2)
    model.train()
    before = snapshot(model)
    first = evaluate(model, data16)
    assert evaluate(model, data16) == first
    assert model.training
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert set(first) == {"acc", "acc_attribute", "acc_spatial"}


def test_perfect_and_random_predictions():
    class Labels:
        def __init__(self, n):
            rng = np.random.default_rng(1)
            self.targets = rng.integers(0, 64, n)
            self.kinds = np.where(np.arange(n) % 2, "spatial", "attribute")

        def __len__(self):
            return len(self.targets)

    d = Labels(10_000)
    assert accuracy_by_kind(d.targets, d) == {"acc": 1.0, "acc_attribute": 1.0, "acc_spatial": 1.0}
    assert abs(random_baseline(d, 64)["acc"] - 1 / 64) < 0.01


def test_empty_dataset():
    with pytest.raises(ValueError):
        Dataset([], VOCAB)


def test_nonfinite_loss_dumps_batch(data16, tmp_path):
    model = LaConvNet(SMALL, len(VOCAB), seed=0)
    model.stem_w.data[0, 0] = np.nan
    cfg = TrainConfig(lr0=1e-3, epochs=2, warmup_epochs=0, batch_size=4, checkpoint_dir=str(tmp_path))
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss):
        train_epoch(model, data16, cfg, AdamState(), np.random.default_rng(0), 0, 8, 0)
    info = json.loads((tmp_path / "nonfinite.json").read_text())
    assert info["nonfinite_params"] == ["stem_w"] and len(info["seeds"]) == 4
    assert np.load(tmp_path / "nonfinite_batch.npz")["images"].shape == (4, 64, 64, 3)


def test_fit_writes_metrics_and_checkpoints(data16, tmp_path):
    model = LaConvNet(SMALL, len(VOCAB), seed=0)
    cfg = TrainConfig(lr0=3e-3, epochs=2, warmup_epochs=1, batch_size=8, checkpoint_dir=str(tmp_path))
    lines = []
    hist = fit(model, VOCAB, data16, data16, cfg, log=lines.append, timestamps=False)
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert rows == hist and len(rows) == 2
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "eval_acc", "eval_acc_attr", "eval_acc_spatial"}
    assert rows[0]["lr"] == 3e-3
    assert (tmp_path / "best.lckp").exists() and (tmp_path / "epoch002.lckp").exists()
    assert lines[0].startswith("epoch=1 ")
