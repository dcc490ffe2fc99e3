import json
import math

import numpy as np
import pytest

from sdgan import losses as L
from sdgan.data import build_dataset, gen_procedural_faces
from sdgan.errors import ConfigError, ContractError, NumericError
from sdgan.networks import build_network
from sdgan.tensor import Tensor
from sdgan.trainer import (
    NicePool,
    TrainConfig,
    aux_loss,
    g1_terms,
    loss_d1,
    loss_d2,
    loss_g1,
    loss_g2,
    nice_gate,
    resume_training,
    save_training_checkpoint,
    train,
)

SHAPE = {"channels": 1, "size": 16}


def half_discriminator():
    """Discriminator whose output is exactly 0.5 for every input."""
    d = build_network("d", np.random.default_rng(0), **SHAPE)
    for t in d.values():
        t.data[...] = 0
    return d


@pytest.fixture
def batches():
    rng = np.random.default_rng(1)
    real = rng.random((4, 1, 16, 16)).astype(np.float32)
    occ = real.copy()
    occ[:, :, 4:12, 4:12] = 0
    return real, occ


@pytest.fixture
def g1():
    return build_network("g1", np.random.default_rng(2), widths=(8, 16), decoder=(8, 8), bottleneck=32, **SHAPE)


@pytest.fixture
def g2():
    return build_network("g2", np.random.default_rng(3), widths=(8, 16), **SHAPE)


@pytest.fixture(scope="module")
def small_set():
    return build_dataset(gen_procedural_faces(40, seed=1, size=(1, 16, 16)), seed=1, mask_hw=(8, 8))


def small_config(**kw):
    base = dict(ssim_window=8, pmse_patch=8, g1_bottleneck=32, max_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


def test_loss_d1_at_half_is_two_ln2(batches, g1):
    real, occ = batches
    d1 = half_discriminator()
    loss = loss_d1(Tensor(real), Tensor(occ), d1, g1)
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    loss.backward()
    assert all(t.grad is None for t in g1.values())
    assert all(t.grad is not None for t in d1.values())


def test_loss_d1_rejects_misaligned_batches(batches, g1):
    real, occ = batches
    with pytest.raises(ContractError):
        loss_d1(Tensor(real), Tensor(occ[:3]), half_discriminator(), g1)


def test_loss_g1_gradients_stay_in_g1(batches, g1):
    real, occ = batches
    d1 = build_network("d", np.random.default_rng(4), **SHAPE)
    loss_g1(Tensor(occ), Tensor(real), g1, d1).backward()
    assert all(t.grad is None for t in d1.values())
    assert all(t.grad is not None for t in g1.values())
    assert d1.trainable


def test_loss_g1_perfect_completion_leaves_ln2(batches, g1):
    real, occ = batches
    terms = g1_terms(Tensor(occ), Tensor(real), g1, half_discriminator(), fake=Tensor(real))
    assert terms["structural"].item() == pytest.approx(0.0, abs=1e-6)
    assert terms["total"].item() == pytest.approx(math.log(2), abs=1e-6)


@pytest.mark.parametrize("objective,expected", [("bce", "bce"), ("bce+ssim", None), ("full", None)])
def test_g1_objectives(batches, g1, objective, expected):
    real, occ = batches
    terms = g1_terms(Tensor(occ), Tensor(real), g1, half_discriminator(), objective)
    ssim_part = L.ssim_loss_value(real, terms["fake"].data)
    want = {"bce": 0.0, "bce+ssim": ssim_part, "full": terms["structural"].item()}[objective]
    assert terms["total"].item() == pytest.approx(terms["bce"].item() + want, rel=1e-5)


@pytest.mark.parametrize("x_loss,admitted", [(0.005, True), (0.01, True), (0.0100001, False), (0.5, False)])
def test_gate_boundary(x_loss, admitted):
    pool = NicePool(100)
    gen, real = np.zeros((2, 1, 4, 4)), np.ones((2, 1, 4, 4))
    assert nice_gate(pool, gen, real, x_loss, 0.01, [3, 4]) is admitted
    assert len(pool) == (2 if admitted else 0)
    assert len(pool.nice) == len(pool.real)


def test_pool_cap_evicts_oldest_pairs():
    pool = NicePool(3)
    for k in range(3):
        pool.append(np.full((2, 1, 2, 2), k), np.full((2, 1, 2, 2), k), [k, k], 0.0)
    assert len(pool) == 3
    assert pool.subjects == [1, 2, 2]
    assert all(np.all(n == s) and np.all(r == s) for n, r, s in zip(pool.nice, pool.real, pool.subjects))


def test_mode2_losses_need_a_pool(g2):
    empty = np.zeros((0, 1, 16, 16))
    with pytest.raises(ContractError):
        loss_d2(empty, empty, half_discriminator(), g2)
    with pytest.raises(ContractError):
        loss_g2(empty, empty, g2, half_discriminator(), 0.1)


def test_loss_d2_at_half_and_isolation(batches, g2):
    real, nice = batches
    d2 = half_discriminator()
    loss = loss_d2(Tensor(real), Tensor(nice), d2, g2)
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    loss.backward()
    assert all(t.grad is None for t in g2.values())


def test_aux_loss_matches_scalar_evaluation(batches):
    real, nice = batches
    refined = np.clip(nice + 0.1, 0, 1)
    a = L.structural_loss_value(real, nice)
    b = L.structural_loss_value(real, refined)
    got = aux_loss(Tensor(real, dtype=np.float64), Tensor(refined, dtype=np.float64), a).item()
    assert got == pytest.approx(abs(a - b), abs=1e-9)
    # equal arguments give zero
    assert aux_loss(Tensor(real, dtype=np.float64), Tensor(nice, dtype=np.float64), a).item() == pytest.approx(0, abs=1e-12)
    plain = aux_loss(Tensor(real, dtype=np.float64), Tensor(refined, dtype=np.float64), a, "plain").item()
    assert plain == pytest.approx(b, abs=1e-9)


def test_loss_g2_freezes_d2(batches, g2):
    real, nice = batches
    d2 = build_network("d", np.random.default_rng(5), **SHAPE)
    stored = L.structural_loss_value(real, nice)
    loss = loss_g2(Tensor(nice), Tensor(real), g2, d2, stored)
    loss.backward()
    assert all(t.grad is None for t in d2.values())
    assert all(t.grad is not None for t in g2.values())


def test_config_validation():
    assert TrainConfig().batch_size == 20 and TrainConfig().gate_threshold == 0.01
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(gate_threshold=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=100001)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(g1_optimizer={"kind": "lbfgs"})
    cfg = TrainConfig(seed=4, aux_mode="plain")
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_one_epoch_on_forty_samples(small_set, tmp_path):
    log_path = tmp_path / "train.jsonl"
    result = train(small_set, small_config(log_path=str(log_path)))
    (rec,) = result.records
    assert rec.mode1_batches == 2
    assert rec.loss_d2 is None and rec.loss_g2 is None and rec.mode2_batches == 0
    assert result.state.step_counts == {"d1": 2, "g1": 2, "d2": 0, "g2": 0}
    logged = [json.loads(l) for l in open(log_path)]
    assert logged[0]["epoch"] == 1 and logged[0]["loss_d2"] is None
    assert all(math.isfinite(logged[0][k]) and logged[0][k] >= 0 for k in ("loss_d1", "loss_g1"))


def test_mode2_runs_after_gate_opens(small_set):
    # a generous threshold lets the first batch in
    result = train(small_set, small_config(gate_threshold=10.0, max_epochs=2, audit=True))
    rec = result.records[-1]
    assert rec.nice_pool_size == 80 and rec.mode2_batches > 0
    order = [e["step"] for e in result.state.trace if e["step"] != "gate"]
    assert order[:4] == ["d1", "g1", "d2", "g2"]
    assert all(e["before"]["d1"] == e["after"]["d1"] for e in result.state.trace if e["step"] == "g1")
    for e in result.state.trace:
        if e["step"] in ("d2", "g2"):
            assert e["before"]["g1"] == e["after"]["g1"] and e["before"]["d1"] == e["after"]["d1"]


def test_resume_matches_uninterrupted_run(small_set, tmp_path):
    cfg = small_config(max_epochs=2, gate_threshold=10.0)
    straight = train(small_set, cfg)

    first = train(small_set, small_config(max_epochs=1, gate_threshold=10.0))
    path = tmp_path / "mid.sdg"
    save_training_checkpoint(path, first.models, first.state, first.config)
    models, state, saved_cfg = resume_training(path)
    assert saved_cfg.max_epochs == 1 and state.epoch == 1
    saved_cfg.max_epochs = 2
    resumed = train(small_set, saved_cfg, models, state)
    for name in ("d1", "g1", "d2", "g2"):
        assert resumed.models[name].fingerprint() == straight.models[name].fingerprint()


def test_checkpoints_and_abort(small_set, tmp_path, monkeypatch):
    cfg = small_config(max_epochs=2, checkpoint_dir=str(tmp_path), checkpoint_every=1)
    train(small_set, cfg)
    assert {p.name for p in tmp_path.iterdir()} == {"epoch_000001.sdg", "epoch_000002.sdg", "final.sdg"}

    import sdgan.trainer as trainer

    monkeypatch.setattr(trainer.L, "bce", lambda *a, **k: Tensor([float("nan")]).sum())
    abort_dir = tmp_path / "abort"
    with pytest.raises(NumericError):
        train(small_set, small_config(checkpoint_dir=str(abort_dir)))
    assert (abort_dir / "aborted.sdg").exists()


def test_empty_dataset_rejected(small_set):
    with pytest.raises(ContractError):
        train(small_set.subset([]), small_config())
