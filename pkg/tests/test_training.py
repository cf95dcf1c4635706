import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cwlab.backbone import BackboneConfig, param_hashes, step_loss
from cwlab.errors import ConfigError, InputError
from cwlab.training import (
    FusionSchedule, Normalizer, StageConfig, TensorData, build_model, fusion_alpha, fusion_gate_tensor, horizon_for,
    k_alpha_for, load_run, multistep_loss, parse_stage_split, run_pipeline, slot_batches, _gen,
)

BB = BackboneConfig("GNN", "nll", num_slots=3, slot_dim=4, hidden_dim=32)


def tiny(**kw):
    base = dict(s1_epochs=2, s2_epochs=2, s3_epochs=2, batch_size=128, s3_batch_size=128, h_max=3, train_horizon=2, val_every=0)
    base.update(kw)
    return StageConfig(**base)


# ------------------------------------------------------------- schedules
def test_fusion_alpha_examples():
    assert fusion_alpha(0.7, 0.0, 123) == 0.7
    assert fusion_alpha(1.0, 0.1, 10) == pytest.approx(math.exp(-1), abs=1e-5)
    assert fusion_alpha(1.0, 0.1, 10) == pytest.approx(0.36788, abs=1e-5)
    with pytest.raises(InputError):
        fusion_alpha(1.0, 0.1, -1)


@given(st.floats(0.01, 1.0), st.floats(0.001, 1.0), st.integers(0, 500))
def test_fusion_alpha_monotone(a0, k, t):
    assert fusion_alpha(a0, k, t + 1) <= fusion_alpha(a0, k, t)


def test_k_alpha_reaches_final():
    k = k_alpha_for(1.0, 0.1, 50)
    assert fusion_alpha(1.0, k, 50) == pytest.approx(0.1)


def test_gate_examples():
    z = torch.randn(4, 3, 2)
    zt = z + torch.full_like(z, 0.5)
    tau = float((zt - z).flatten(1).norm(dim=1)[0])
    _, a_eff = fusion_gate_tensor(z, zt, 1.0, tau, 5.0)
    torch.testing.assert_close(a_eff, torch.full((4,), 0.5))
    zg, a_eff = fusion_gate_tensor(z, z.clone(), 0.8, 0.3, 5.0)
    torch.testing.assert_close(zg, z)
    torch.testing.assert_close(a_eff, torch.full((4,), 0.8 * torch.sigmoid(torch.tensor(1.5)).item()))
    zg, _ = fusion_gate_tensor(z, zt, 1.0, 0.0, 5.0, gate_enabled=False)
    torch.testing.assert_close(zg, zt)
    s = FusionSchedule(1.0, 0.0, 0.0, 5.0, False)
    torch.testing.assert_close(s.gate(z, zt, 3)[0], zt)


def test_horizon_policies():
    rng = np.random.default_rng(0)
    assert all(horizon_for("fixed", e, 60, 5, 10, rng) == 5 for e in range(60))
    assert horizon_for("single-step", 3, 10, 5, 10, rng) == 1
    late = [horizon_for("late-mixed", e, 60, 5, 10, rng) for e in range(60) for _ in range(20)]
    early = late[: 40 * 20]
    assert set(early) == {5}
    assert set(late[40 * 20:]) <= set(range(1, 11)) and len(set(late[40 * 20:])) > 5
    cur = [horizon_for("curriculum", e, 10, 5, 10, rng) for e in range(10)]
    assert cur[0] == 1 and cur[-1] == 10 and cur == sorted(cur)
    with pytest.raises(ConfigError):
        horizon_for("bogus", 0, 1, 1, 1, rng)


def test_stage_split():
    assert parse_stage_split("s1_8_s2_40") == (8, 40)
    cfg = StageConfig(stage_split="s1_12_s2_48")
    assert (cfg.s1_epochs, cfg.s2_epochs) == (12, 48)
    with pytest.raises(ConfigError):
        parse_stage_split("8/40")


def test_defaults_stored_verbatim():
    c = StageConfig()
    assert (c.seed, c.lr, c.batch_size, c.s1_epochs, c.s2_epochs, c.s3_epochs, c.s3_lr, c.s3_batch_size) == (
        42, 5e-4, 1024, 20, 80, 60, 1e-4, 256)


@pytest.mark.parametrize("bad", [dict(alpha0=1.5), dict(s1_epochs=-1), dict(rollout_policy="x"), dict(h_max=0)])
def test_stage_config_validation(bad):
    with pytest.raises(ConfigError):
        StageConfig(**bad).validate()


def test_slot_batches_deterministic():
    idx = np.arange(100)
    a = slot_batches(42, 3, idx, 32)
    b = slot_batches(42, 3, idx, 32)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == list(range(100))


def test_normalizer_modes():
    s = np.random.default_rng(0).normal(size=(100, 3)) * [1.0, 10.0, 100.0]
    per = Normalizer.fit(s, "per_dim")
    glob = Normalizer.fit(s, "global")
    out = per(torch.tensor(s)).numpy()
    np.testing.assert_allclose(out.std(0), 1.0, atol=1e-9)
    assert np.allclose(glob.scale, glob.scale[0])


def test_multistep_h1_is_one_step():
    m = build_model(BB, (12,), 0, 12, False, 0)
    z0, tgt = torch.randn(8, 3, 4), torch.randn(8, 1, 3, 4)
    acts = torch.zeros(8, 1, 0)
    a = multistep_loss(m, z0, acts, tgt, BB, _gen(1), 1)
    pred = m.step(z0, acts[:, 0]).predicted
    b = step_loss(pred, tgt[:, 0], tgt[torch.randperm(8, generator=_gen(1)), 0], BB)
    torch.testing.assert_close(a, b)


# ------------------------------------------------------------ pipelines
@pytest.fixture(scope="module")
def paired(physics_ds):
    cfg = tiny()
    base = run_pipeline(BB, cfg, physics_ds, False)
    causal = run_pipeline(BB, cfg, physics_ds, True)
    return base, causal


def test_freezing_invariants(paired):
    _, causal = paired
    assert causal.hashes["s2_detail"]["equal"] and causal.hashes["s2"]["before"] == causal.hashes["s2"]["after"]
    assert causal.hashes["s3_detail"]["equal"] and causal.hashes["s3"]["before"] == causal.hashes["s3"]["after"]
    assert causal.hashes["s1_branch"]["before"] == causal.hashes["s1_branch"]["after"]


def test_paired_batch_sequences(paired):
    base, causal = paired
    assert [r["batch_hash"] for r in base.records] == [r["batch_hash"] for r in causal.records]
    assert [r["stage"] for r in causal.records] == ["s1"] * 2 + ["s2"] * 2 + ["s3"] * 2


def test_rerun_bit_identical(paired, physics_ds):
    _, causal = paired
    again = run_pipeline(BB, tiny(), physics_ds, True)
    assert [r["losses"] for r in again.records] == [r["losses"] for r in causal.records]
    assert param_hashes(again.model) == param_hashes(causal.model)


def test_s1_zero_epochs_keeps_init(physics_ds):
    res = run_pipeline(BB, tiny(s1_epochs=0, s2_epochs=0, s3_epochs=0), physics_ds, True)
    init = build_model(BB, (12,), physics_ds.episodes[0].actions.shape[1], 12, True, 42)
    got, want = param_hashes(res.model.encoder), param_hashes(init.encoder)
    assert got == want


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_on_pushing(pushing_ds, seed):
    bb = BackboneConfig("GNN", "nll", num_slots=5, slot_dim=2, hidden_dim=32)
    res = run_pipeline(bb, StageConfig(seed=seed, s1_epochs=6, s2_epochs=0, s3_epochs=0, batch_size=64, val_every=0), pushing_ds, False)
    losses = [r["losses"]["total"] for r in res.records]
    assert losses[-1] < losses[0]


def test_joint_and_gate_off_variants(physics_ds):
    joint = run_pipeline(BB, tiny(joint=True), physics_ds, True)
    assert {r["stage"] for r in joint.records} == {"joint"} and len(joint.records) == 6
    assert {"rec", "kl", "align", "dag", "mask"} <= set(joint.records[0]["losses"])
    off = run_pipeline(BB, tiny(gate_enabled=False), physics_ds, True)
    assert off.model.gate_enabled is False


def test_run_directory_roundtrip(tmp_path, physics_ds):
    res = run_pipeline(BB, tiny(), physics_ds, True, run_dir=tmp_path)
    for name in ("config.json", "records.jsonl", "ckpt_s1.bin", "ckpt_s2.bin", "ckpt_s3.bin", "adjacency.csv", "normalizer.json"):
        assert (tmp_path / name).exists()
    model, header = load_run(tmp_path)
    assert param_hashes(model) == param_hashes(res.model)
    assert header["config_hash"] == res.config_hash


def test_horizon_longer_than_episode(physics_ds):
    with pytest.raises(InputError):
        run_pipeline(BB, tiny(h_max=50), physics_ds, True)


def test_tensor_data_index(physics_ds):
    d = TensorData(physics_ds)
    idx = d.index(3)
    assert idx[:, 1].max() == d.T - 3
    with pytest.raises(InputError):
        d.index(d.T + 1)
