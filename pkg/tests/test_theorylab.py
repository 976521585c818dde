import math

import numpy as np
import pytest

from taml import theorylab as tl
from taml.augment import AugmentConfig, InterpolationConfig, dirichlet_draws
from taml.theorylab import (
    pair_vs_multi_comparison,
    beta_pair_variance,
    dirichlet_component_variance,
    gamma_sweep,
    mean_with_se,
    regularizer_trace,
    total_variance_check,
)


def test_closed_form_values():
    assert beta_pair_variance(1, 1) == pytest.approx(1 / 12, abs=1e-15)
    assert beta_pair_variance(0.2, 0.2) == pytest.approx(0.04 / (0.16 * 1.4), abs=1e-15)
    assert dirichlet_component_variance([0.2] * 3) == pytest.approx(0.2 * 0.4 / (0.36 * 1.6), abs=1e-15)
    assert dirichlet_component_variance([0.2] * 4) == pytest.approx(0.2 * 0.6 / (0.64 * 1.8), abs=1e-15)


def test_closed_form_errors():
    with pytest.raises(ValueError):
        beta_pair_variance(0, 1)
    with pytest.raises(ValueError):
        dirichlet_component_variance([0.2, -0.1])


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (0.2, 0.2), (0.5, 2.0), (3.0, 0.7)])
def test_m2_reduction(a, b):
    assert abs(dirichlet_component_variance([a, b]) - beta_pair_variance(a, b)) <= 1e-15 * beta_pair_variance(a, b)


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (0.2, 0.2), (0.5, 2.0)])
def test_beta_mc(a, b):
    assert tl.mc_beta_variance(a, b, 1_000_000).agrees_with(beta_pair_variance(a, b))


@pytest.mark.parametrize("m", [2, 3, 4])
def test_dirichlet_mc(m):
    assert tl.mc_dirichlet_variance([0.2] * m, 1_000_000).agrees_with(dirichlet_component_variance([0.2] * m))


def test_mc_detects_a_wrong_formula():
    # the MC check has power: a 5% error in the closed form is flagged
    est = tl.mc_dirichlet_variance([0.2] * 3, 1_000_000)
    assert not est.agrees_with(1.05 * dirichlet_component_variance([0.2] * 3))


@pytest.mark.parametrize("a", [0.2, 0.5, 1.0])
def test_two_task_mix_is_beta(a):
    assert tl.mti_beta_ks(a, 100_000) < 0.005


def test_pair_vs_multi_reported_as_computed():
    r = pair_vs_multi_comparison()
    assert r["beta_pair_variance"] == pytest.approx(0.178571, abs=1e-6)
    assert r["dirichlet_component_variance"] == pytest.approx(0.138889, abs=1e-6)
    assert r["beta_le_dirichlet"] is False


def test_sweep_monotone_and_matches_closed_form():
    grid = [0.1, 0.2, 0.5, 1, 2, 5]
    res = gamma_sweep(grid, 4, 200_000, seed=1)
    assert res.monotone("e_max_lambda") and res.monotone("var_lambda")
    for g, v, se in zip(grid, res.var_lambda, res.var_se):
        assert abs(v - dirichlet_component_variance([g] * 4)) <= 3 * se
    assert len(res.gamma_grid) == len(res.e_max_lambda) == len(res.var_lambda)


def test_sweep_small_gamma_concentrates():
    assert gamma_sweep([0.01], 4, 100_000).e_max_lambda[0] > 0.97


def test_sweep_large_gamma_against_numpy():
    # E[max] at gamma=100 checked against numpy's sampler; the gap to gamma=1e4
    # is set by the O(1/sqrt(gamma)) spread of the weights, about 0.023 here
    ours = gamma_sweep([100.0, 1e4], 4, 200_000, seed=2)
    ref = np.random.default_rng(9).dirichlet([100.0] * 4, 200_000).max(axis=1)
    r = mean_with_se(ref)
    assert abs(ours.e_max_lambda[0] - r.value) <= 4 * math.hypot(r.se, ours.e_max_se[0])
    assert ours.e_max_lambda[1] == pytest.approx(0.25, abs=0.005)
    assert 0.015 < ours.e_max_lambda[0] - ours.e_max_lambda[1] < 0.035


def test_sweep_detects_non_monotone():
    res = tl.SweepResult([1, 2], [0.5, 0.6], [0.1, 0.1], [0.001, 0.001], [0.001, 0.001], 10, 2)
    assert not res.monotone("e_max_lambda")


def test_vectorized_replay_matches_simple_loop():
    # independent simple implementation of one augmented draw of task j
    feats = tl.default_theory_features()
    cfg = AugmentConfig(interp=InterpolationConfig((0.2, 0.2, 0.2)), use_fm=False)
    rng = np.random.default_rng(0)
    draws = tl.augment_task_draws(feats, 1, 20_000, cfg, (np.zeros(16), np.zeros(16)), rng)
    simple = []
    r2 = np.random.default_rng(1)
    for _ in range(20_000):
        chosen = r2.choice(4, 3, replace=False)
        lam = r2.dirichlet([0.2] * 3)
        mix = np.tensordot(lam, feats[chosen], axes=1)
        x = feats[1]
        simple.append((x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5) * np.sqrt(mix.var(0) + 1e-5) + mix.mean(0))
    simple = np.array(simple)
    se = np.sqrt(draws.var(0) / 20_000 + simple.var(0) / 20_000)
    assert np.all(np.abs(draws.mean(0) - simple.mean(0)) <= 5 * se + 1e-12)


def test_identity_augmentation_split():
    feats = tl.default_theory_features()
    cfg = AugmentConfig(use_mti=False, use_mtst=False, use_fm=False)
    res = total_variance_check(feats, cfg, 20_000)
    data_cov = np.cov(feats.reshape(-1, feats.shape[2]), rowvar=False, ddof=0)
    assert np.max(np.abs(res.expected_conditional_cov)) < 1e-12
    np.testing.assert_allclose(res.cov_of_conditional_mean, data_cov, atol=1e-10)
    assert res.within_noise()


def test_fm_off_limit_split():
    feats = tl.default_theory_features()
    cfg = AugmentConfig(use_mti=False, use_mtst=False)
    w = (np.full(16, -40.0), np.full(16, -40.0))
    res = total_variance_check(feats, cfg, 20_000, fm_w=w)
    assert np.max(np.abs(res.expected_conditional_cov)) < 1e-20
    np.testing.assert_allclose(res.total_cov, res.cov_of_conditional_mean, atol=5 * res.se_bound + 1e-12)


def test_full_augmentation_split():
    feats = tl.default_theory_features()
    res = total_variance_check(feats, AugmentConfig(interp=InterpolationConfig((0.2, 0.2, 0.2))), 100_000)
    assert res.symmetric()
    assert res.within_noise()
    assert res.min_eig_cov_of_mean >= -1e-8 - 5 * res.se_bound
    assert res.residual_frobenius == pytest.approx(
        np.linalg.norm(res.total_cov - res.expected_conditional_cov - res.cov_of_conditional_mean), rel=1e-12
    )


def test_regularizer_trace_values():
    x = np.array([0.0, 2.0])  # mean 1, variance 1
    r = regularizer_trace(x, math.log(math.e - 1), 1_000_000)
    assert r.closed_form == pytest.approx(2.0, abs=1e-12)
    assert r.empirical.agrees_with(2.0)
    off = regularizer_trace(x, -40.0, 10_000)
    assert off.closed_form < 1e-30 and off.empirical.value < 1e-30
    r2 = regularizer_trace(x, math.log(math.exp(2) - 1), 10_000)
    assert r2.closed_form == pytest.approx(4 * r.closed_form, rel=1e-12)


def test_dirichlet_draws_match_numpy_moments():
    ours = dirichlet_draws([0.5, 2.0, 1.0], 400_000, np.random.default_rng(0))
    ref = np.random.default_rng(1).dirichlet([0.5, 2.0, 1.0], 400_000)
    se = np.sqrt(ours.var(0) / 4e5 + ref.var(0) / 4e5)
    assert np.all(np.abs(ours.mean(0) - ref.mean(0)) <= 4 * se)
