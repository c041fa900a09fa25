import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from popsynth.evaluation import (
    chi_square_test,
    dcr,
    household_matrix,
    joint_pair_metrics,
    kl_metric,
    ks_test,
    marginal_report,
    person_level_matrix,
    rmse_metric,
)
from popsynth.schema import empirical_marginals


def test_rmse_hand_value():
    assert rmse_metric([0.6, 0.4], [0.5, 0.5]) == pytest.approx(0.1, rel=1e-12)


def test_rmse_symmetric(rng):
    a, b = rng.random(5), rng.random(5)
    assert rmse_metric(a, b) == rmse_metric(b, a)


def test_kl_zero_on_identical():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_metric(p, p) == pytest.approx(0.0, abs=1e-12)


def test_kl_matches_oracle_and_is_directed(rng):
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(4))
    assert kl_metric(p, q) == pytest.approx(oracles.brute_kl_metric(p, q), rel=1e-12)
    assert kl_metric(p, q) != pytest.approx(kl_metric(q, p), rel=1e-6)


def test_kl_handles_zero_reference():
    # smoothing keeps the divergence finite when the reference has a zero cell
    v = kl_metric(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert np.isfinite(v) and v > 0


def test_chi_square_exact_match_is_p1():
    obs = np.array([50.0, 30.0, 20.0])
    res = chi_square_test(obs, obs / obs.sum())
    assert res.statistic == pytest.approx(0.0, abs=1e-9)
    assert res.p_value == pytest.approx(1.0)


def test_chi_square_hand_statistic():
    # obs (10, 90) against fifty-fifty: (40^2/50)*2 = 64
    res = chi_square_test(np.array([10.0, 90.0]), np.array([0.5, 0.5]))
    assert res.statistic == pytest.approx(64.0, rel=1e-6)
    assert res.dof == 1
    assert res.p_value < 1e-10


def test_chi_square_merges_small_expected():
    obs = np.array([60.0, 36.0, 2.0, 1.0, 1.0])
    res = chi_square_test(obs, np.array([0.6, 0.36, 0.02, 0.01, 0.01]))
    # three tiny expected cells pool to 4 counts, still small, folded onward
    assert res.merged_categories == 4
    assert res.dof == 1
    assert res.p_value == pytest.approx(1.0, abs=1e-3)


def test_chi_square_merge_collapse_to_single_bucket():
    res = chi_square_test(np.array([96.0, 2.0, 1.0, 1.0]), np.array([0.96, 0.02, 0.01, 0.01]))
    assert res.dof == 0
    assert res.p_value == 1.0


def test_chi_square_all_small_keeps_buckets():
    obs = np.array([2.0, 1.0, 1.0])
    res = chi_square_test(obs, np.array([0.5, 0.25, 0.25]))
    assert res.merged_categories == 0
    assert res.dof == 2


def test_chi_square_rejects_zero_total():
    with pytest.raises(ValueError):
        chi_square_test(np.zeros(3), np.array([0.5, 0.3, 0.2]))


def test_dcr_matches_brute_force(rng):
    syn = rng.uniform(0.05, 0.95, size=(6, 8))
    micro = (rng.random((5, 8)) < 0.5).astype(float)
    fast = dcr(syn, micro, chunk=2)
    brute = np.array([oracles.brute_dcr(row, micro) for row in syn])
    np.testing.assert_allclose(fast, brute, atol=1e-12)


def test_dcr_self_distance_is_tiny(tiny_encoded):
    x = tiny_encoded.values
    d = dcr(x, x)
    assert d.max() <= 1e-5


def test_dcr_rejects_width_mismatch():
    with pytest.raises(ValueError):
        dcr(np.zeros((2, 3)), np.zeros((2, 4)))


def test_ks_identical_samples_p1(rng):
    a = rng.normal(size=200)
    res = ks_test(a, a.copy())
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(1.0)


def test_ks_disjoint_samples_rejects():
    res = ks_test(np.zeros(50), np.ones(50))
    assert res.statistic == pytest.approx(1.0)
    assert res.p_value < 1e-6


def test_ks_same_distribution_accepts(rng):
    a = rng.normal(size=400)
    b = rng.normal(size=400)
    assert ks_test(a, b).p_value > 0.05


def test_ks_binned_coarsens(rng):
    a = rng.normal(size=300)
    b = a + rng.normal(scale=1e-4, size=300)
    exact = ks_test(a, b)
    coarse = ks_test(a, b, binned=True, bins=10)
    assert coarse.statistic <= exact.statistic + 1e-12
    assert coarse.p_value >= exact.p_value - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ks_property_statistic_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=r.integers(2, 40))
    b = r.normal(loc=r.uniform(-2, 2), size=r.integers(2, 40))
    res = ks_test(a, b)
    assert 0.0 <= res.statistic <= 1.0
    assert 0.0 <= res.p_value <= 1.0


def test_joint_pairs_self_comparison_is_zero(tiny_table):
    rep = joint_pair_metrics(tiny_table, tiny_table)
    n_vars = len(rep.variables)
    assert len(rep.rmse) == n_vars * (n_vars - 1) // 2
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in rep.rmse.values())
    assert all(v == pytest.approx(0.0, abs=1e-9) for v in rep.kl.values())
    assert all(v == pytest.approx(1.0) for v in rep.p_value.values())


def test_joint_pairs_rejects_schema_mismatch(tiny_table, tiny_schema):
    other = tiny_schema.with_n_window(3)
    from popsynth.schema import restructure

    table2 = restructure(tiny_table.to_records(), other)
    with pytest.raises(ValueError):
        joint_pair_metrics(tiny_table, table2)


def test_person_level_matrix_shape(tiny_table, tiny_schema):
    m = person_level_matrix(tiny_table)
    hh_w = sum(v.width for v in tiny_schema.household_vars)
    p_w = sum(v.width for v in tiny_schema.person_vars)
    assert m.shape == (6, hh_w + p_w)
    np.testing.assert_array_equal(m.sum(axis=1), 4.0)  # 4 one-hot groups per row


def test_household_matrix_equals_encoding(tiny_table, tiny_encoded):
    np.testing.assert_array_equal(household_matrix(tiny_table), tiny_encoded.values)


def test_marginal_report_self_is_perfect(tiny_table):
    rep = marginal_report(tiny_table, tiny_table)
    for row in rep.rows.values():
        assert row["rmse_vs_microdata"] == pytest.approx(0.0, abs=1e-12)
        assert row["kl_vs_microdata"] == pytest.approx(0.0, abs=1e-9)
        assert row["p_vs_microdata"] == pytest.approx(1.0)
    assert rep.means["rmse_vs_microdata"] == pytest.approx(0.0, abs=1e-12)


def test_marginal_report_with_targets_adds_columns(tiny_table):
    targets = empirical_marginals(tiny_table)
    rep = marginal_report(tiny_table, tiny_table, targets=targets)
    row = rep.rows["OWN"]
    assert "rmse_vs_target" in row and "p_vs_target" in row
    assert "baseline_rmse" in row and "baseline_kl" in row
    assert row["rmse_vs_target"] == pytest.approx(0.0, abs=1e-12)
