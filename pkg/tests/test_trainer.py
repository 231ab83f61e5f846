import math

import numpy as np
import pytest

from keyfort.keyed_transform import InvalidKeyError, generate_key, identity_key
from keyfort.model import ModelConfig, Pipeline, VisionTransformer, attach_lora
from keyfort.trainer import (
    Adam,
    TrainConfig,
    evaluate_accuracy,
    finetune,
    lr_at,
    mean_loss,
    pretrain,
    proliferate,
    train_loop,
)

from conftest import TINY, synthetic

FAST = dict(batch_size=32, lr=3e-3, hflip=False)


def test_config_validation_lists_every_error():
    with pytest.raises(ValueError) as e:
        TrainConfig(epochs=-1, batch_size=0, lr=0, label_smoothing=1.0, mode="x")
    msg = str(e.value)
    for field in ("epochs", "batch_size", "lr", "label_smoothing", "mode"):
        assert field in msg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, warmup_fraction=0.1)
    total = 100
    assert lr_at(0, total, cfg) == pytest.approx(0.1)
    assert lr_at(9, total, cfg) == pytest.approx(1.0)
    assert lr_at(10, total, cfg) == pytest.approx(1.0)
    assert lr_at(55, total, cfg) == pytest.approx(0.5)
    assert lr_at(99, total, cfg) == pytest.approx(0.5 * (1 + math.cos(math.pi * 89 / 90)))


def test_adam_first_step_is_lr_sign():
    # with bias correction, the first step is lr * g / (|g| + eps)
    cfg = TrainConfig(lr=0.1)
    p = {"w": np.array([1.0, -2.0, 0.5], np.float32)}
    g = {"w": np.array([0.3, -4.0, 0.0], np.float32)}
    Adam(p, cfg).step(p, g, 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.5], atol=1e-6)


def test_pretrain_reduces_loss(toy_data):
    tr, te = toy_data
    m, rep = pretrain(tr, TrainConfig(epochs=1, **FAST), TINY, te)
    assert rep.final_loss < rep.initial_loss
    assert len(rep.epochs) == 1
    assert 0 <= rep.epochs[0].train_acc <= 1 and 0 <= rep.epochs[0].val_acc <= 1
    assert rep.wall_clock_s > 0


def test_pretrain_deterministic(toy_data):
    tr, _ = toy_data
    cfg = TrainConfig(epochs=1, batch_size=64, lr=3e-3)
    a, _ = pretrain(tr.subset(128), cfg, TINY)
    b, _ = pretrain(tr.subset(128), cfg, TINY)
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes(), k


def test_shape_mismatch(toy_data):
    tr, _ = toy_data
    with pytest.raises(ValueError, match="expects"):
        pretrain(tr, TrainConfig(epochs=1), ModelConfig(image_size=(16, 16), channels=3, vit_patch=4, num_classes=4))


def test_nonfinite_loss_aborts(toy_data):
    tr, _ = toy_data
    m = VisionTransformer(TINY)
    m.head.params["bias"][0] = np.nan
    with pytest.raises(FloatingPointError):
        train_loop(m, tr.subset(32), TrainConfig(epochs=1, hflip=False))


def test_identity_key_zero_epochs_is_m0(toy_models, toy_data):
    m_o, _ = toy_models
    tr, te = toy_data
    mk, rep = finetune(m_o, identity_key(2, 3), tr, TrainConfig(epochs=0, mode="finetune_full"))
    for k, v in m_o.state_dict().items():
        assert np.array_equal(mk.state_dict()[k], v)
    np.testing.assert_array_equal(Pipeline(mk, mk.key).logits(te.images), Pipeline(m_o).logits(te.images))


def test_finetune_full_updates_everything(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    mk, _ = finetune(m_o, generate_key(5, 2, 3), tr.subset(64), TrainConfig(epochs=1, mode="finetune_full", **FAST))
    changed = [k for k, v in m_o.state_dict().items() if not np.array_equal(mk.state_dict()[k], v)]
    assert set(changed) == set(m_o.state_dict())
    assert mk.mode == "full"


def test_finetune_lora_frozen_base(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    before = {k: v.copy() for k, v in m_o.state_dict().items()}
    cfg = TrainConfig(epochs=2, mode="finetune_lora", lora_rank=2, lora_alpha=4.0, **FAST)
    mk, rep = finetune(m_o, generate_key(5, 2, 3), tr.subset(128), cfg)
    assert mk.mode == "lora"
    sd = mk.state_dict()
    for k, v in before.items():
        if k.startswith("head."):
            assert not np.array_equal(sd[k], v), k
        else:
            assert sd[k].tobytes() == v.tobytes(), k
    assert any(sd[k].any() for k in sd if k.endswith("lora_B"))
    # m_o itself is untouched
    for k, v in before.items():
        assert m_o.state_dict()[k].tobytes() == v.tobytes()


def test_finetune_lora_on_attached_model(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    ml = attach_lora(m_o, r=2)
    mk, _ = finetune(ml, generate_key(5, 2, 3), tr.subset(32), TrainConfig(epochs=1, mode="finetune_lora", **FAST))
    assert [n for n in mk.state_dict() if "lora_A" in n] == [n for n in ml.state_dict() if "lora_A" in n]


def test_finetune_key_incompatible(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    with pytest.raises(InvalidKeyError):
        finetune(m_o, generate_key(0, 3, 3), tr, TrainConfig(epochs=1, mode="finetune_full"))
    with pytest.raises(InvalidKeyError):
        finetune(m_o, generate_key(0, 2, 1), tr, TrainConfig(epochs=1, mode="finetune_full"))


def test_finetune_rejects_pretrain_mode(toy_models, toy_data):
    with pytest.raises(ValueError):
        finetune(toy_models[0], generate_key(0, 2, 3), toy_data[0], TrainConfig(epochs=1))


def test_defended_clean_close_to_plain(toy_models, toy_data):
    m_o, m_k = toy_models
    _, te = toy_data
    assert evaluate_accuracy(m_k, m_k.key, te) >= evaluate_accuracy(m_o, None, te) - 0.05


def test_proliferate(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    te = synthetic(1000, 8, "test")
    cfg = TrainConfig(epochs=8, batch_size=32, lr=2e-3, hflip=False, mode="finetune_full")
    out = proliferate(m_o, [1, 2, 3], tr, cfg, 2)
    perms = [k.perm for k, _, _ in out]
    assert len(set(perms)) == 3
    accs = [evaluate_accuracy(m, k, te) for k, m, _ in out]
    assert max(accs) - min(accs) <= 0.03
    with pytest.raises(ValueError):
        proliferate(m_o, [1, 1], tr, TrainConfig(epochs=0, mode="finetune_full"), 2)


def test_proliferate_single_seed_is_finetune(toy_models, toy_data):
    m_o, _ = toy_models
    tr, _ = toy_data
    cfg = TrainConfig(epochs=1, mode="finetune_full", **FAST)
    [(k, m, _)] = proliferate(m_o, [4], tr.subset(64), cfg, 2)
    m2, _ = finetune(m_o, generate_key(4, 2, 3), tr.subset(64), cfg)
    for name, v in m.state_dict().items():
        assert v.tobytes() == m2.state_dict()[name].tobytes()


def test_hflip_applied_before_transform(toy_data, monkeypatch):
    # record what the model sees; with hflip and a key, inputs must be t(flip(x))
    import keyfort.trainer as tmod

    tr, _ = toy_data
    key = generate_key(3, 2, 3)
    seen = []
    m = VisionTransformer(TINY)
    orig = m.forward

    def spy(x):
        seen.append(x.copy())
        return orig(x)

    m.forward = spy
    cfg = TrainConfig(epochs=1, batch_size=512, hflip=True, seed=7)
    m.mode = "full"
    tmod.train_loop(m, tr, cfg, key)
    rng = np.random.default_rng(7)
    order = rng.permutation(len(tr))
    flip = rng.random(len(order)) < 0.5
    x = tr.images[order]
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    from keyfort.keyed_transform import transform

    # seen[0] is from the initial-loss pass; seen[1] is the training batch
    np.testing.assert_array_equal(seen[-1], transform(x, key))


def test_report_outputs(tmp_path, toy_data):
    tr, _ = toy_data
    _, rep = pretrain(tr.subset(64), TrainConfig(epochs=2, **FAST), TINY)
    rep.write_json(tmp_path / "r.json")
    rep.append_csv(tmp_path / "r.csv")
    rep.append_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("mode,epoch") and len(lines) == 5


def test_mean_loss_initial_near_log_k(toy_data):
    tr, _ = toy_data
    m = VisionTransformer(TINY)
    assert abs(mean_loss(m, None, tr, 0.0) - math.log(4)) < 0.1
