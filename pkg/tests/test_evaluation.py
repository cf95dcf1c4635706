import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cwlab.errors import ConfigError, InputError
from cwlab.evaluation import (
    ABLATION_BLOCKS, ABLATION_ROWS, OracleScorer, RandomScorer, ablation_table, ablation_variants, apply_overrides,
    binomial_bounds, compute_metrics, config_diff, counterfactual_eval, format_paired, hits_mrr, identifiability_test,
    mean_std, rank_of_positive, run_ablation_grid, shd, structure_recovery,
)


def test_rank_examples():
    scores = np.array([[2.0, 1.0, 0.0]])  # higher is better (negative distance)
    assert rank_of_positive(scores, np.array([0])).tolist() == [1]
    ties = np.zeros((3, 4))
    assert rank_of_positive(ties, np.array([0, 2, 3])).tolist() == [1, 3, 4]


def test_metric_spot_values():
    h, m = hits_mrr([1, 2, 4])
    assert h == pytest.approx(1 / 3) and m == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert m == pytest.approx(0.5833, abs=1e-4)
    assert hits_mrr([1, 1, 1]) == (1.0, 1.0)
    assert hits_mrr([11] * 5) == (0.0, pytest.approx(1 / 11))


def _enumerated(ranks):
    # direct evaluation of the definitions
    M = len(ranks)
    return sum(1 for r in ranks if r == 1) / M, sum(1.0 / r for r in ranks) / M


def test_exhaustive_small_cases():
    for N in range(1, 6):
        for M in range(1, 5):
            for ranks in itertools.product(range(1, N + 1), repeat=M):
                h, m = hits_mrr(ranks)
                eh, em = _enumerated(ranks)
                assert h == pytest.approx(eh, abs=1e-12) and m == pytest.approx(em, abs=1e-12)


@given(st.lists(st.integers(1, 11), min_size=1, max_size=50))
def test_metric_identities(ranks):
    h, m = hits_mrr(ranks)
    assert m >= h - 1e-12
    assert (h * len(ranks)) == pytest.approx(round(h * len(ranks)))
    h2, m2 = hits_mrr(list(ranks) + [1])
    assert h2 >= h - 1e-12 and m2 >= m - 1e-12


@given(st.lists(st.lists(st.integers(0, 3), min_size=5, max_size=5), min_size=1, max_size=10), st.data())
def test_tie_break_deterministic(rows, data):
    scores = np.array(rows, dtype=float)
    pos = np.array([data.draw(st.integers(0, 4)) for _ in rows])
    assert np.array_equal(rank_of_positive(scores, pos), rank_of_positive(scores.copy(), pos.copy()))


def test_oracle_and_random_scorers(physics_bench):
    oracle = counterfactual_eval(OracleScorer(), physics_bench)[0].flat()
    assert oracle["CF-H@1"] == 1.0 and oracle["H@1@1"] == 1.0
    rnd = counterfactual_eval(RandomScorer(0), physics_bench)[0].flat()
    assert all(rnd[k] <= oracle[k] for k in oracle)


def test_format_and_mean_std():
    assert format_paired(0.11, 0.41) == "11.0/41.0, Δ=+30.0"
    assert format_paired(0.5, 0.25).endswith("Δ=-25.0")
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)
    lo, hi = binomial_bounds(1 / 11, 2000)
    assert lo < 1 / 11 < hi


def test_structure_examples():
    rng = np.random.default_rng(0)
    A = np.abs(rng.normal(size=(6, 6)))
    np.fill_diagonal(A, 0)
    d = structure_recovery(A, A)
    assert d.rank_correlation == pytest.approx(1.0) and d.topk_overlap == 1.0
    gt = np.zeros((6, 6))
    gt[0, 1] = gt[1, 2] = gt[2, 3] = 1.0
    wrong = gt[[3, 4, 5, 0, 1, 2]]
    dw = structure_recovery(wrong, gt)
    assert dw.topk_overlap < structure_recovery(gt, gt).topk_overlap and dw.misaligned
    with pytest.raises(InputError):
        structure_recovery(np.zeros((2, 2)), np.zeros((3, 3)))


def test_random_overlap_matches_chance():
    gt = np.zeros((6, 6))
    gt[0, 1] = gt[1, 2] = gt[2, 3] = gt[3, 4] = 1.0
    rng = np.random.default_rng(1)
    vals = [structure_recovery(rng.random((6, 6)), gt, rel=0.0).topk_overlap for _ in range(600)]
    assert np.mean(vals) == pytest.approx(4 / 30, abs=0.03)


def test_shd_counts_reversal_once():
    T = np.zeros((3, 3), bool)
    T[0, 1] = True
    E = np.zeros((3, 3), bool)
    E[1, 0] = True
    assert shd(T, E) == 1 and shd(T, T) == 0
    E[1, 2] = True
    assert shd(T, E) == 2


def test_identifiability_empty_graph():
    res = identifiability_test(d_s=3, edge_density=0, n_samples=10000, seeds=(0,))
    assert res["shd"] == [0]
    with pytest.raises(InputError):
        identifiability_test(d_s=7)


# -------------------------------------------------------------- ablations
BASE = {"backbone": {"objective": "contrastive"}, "stages": {"s1_epochs": 20, "s2_epochs": 80, "gate_enabled": True,
                                                              "joint": False, "use_branch": True, "supervision": True,
                                                              "rollout_policy": "late-mixed"}, "with_causal": True}


def test_variant_rows_and_single_factor():
    v = ablation_variants()
    assert list(v) == ABLATION_ROWS
    assert "stage split: s1_8_s2_40" in v and "gate off" in v
    assert config_diff(BASE, apply_overrides(BASE, v["gate off"])) == ["stages.gate_enabled"]
    for name, ov in v.items():
        assert len(config_diff(BASE, apply_overrides(BASE, ov))) <= 1, name
    cfg = apply_overrides(BASE, v["stage split: s1_8_s2_40"])
    assert (cfg["stages"]["s1_epochs"], cfg["stages"]["s2_epochs"]) == (8, 40)


def test_multi_factor_variant_rejected():
    with pytest.raises(ConfigError):
        run_ablation_grid(BASE, {"bad": {"stages.gate_enabled": False, "stages.joint": True}}, lambda c: {})


def test_table_block_order():
    v = ablation_variants()
    rows = run_ablation_grid(BASE, dict(reversed(list(v.items()))), lambda c: {"H@1": 0.5, "MRR": 0.5, "CF-H@1": 0.1, "CF-MRR": 0.2})
    table = ablation_table(rows)
    positions = [table.index(n) for n in ABLATION_ROWS]
    assert positions == sorted(positions)
    assert list(ABLATION_BLOCKS) == ["strategy", "removal", "sensitivity"]
