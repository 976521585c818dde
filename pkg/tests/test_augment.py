import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taml import diffcore as dc
from taml.augment import (
    AugmentConfig,
    AugmentConfigError,
    InterpolationConfig,
    MixWeights,
    TaskLayout,
    build_augmented_batch,
    dirichlet_draws,
    fm_apply,
    fm_paths,
    fm_sample,
    init_fm_params,
    mti_interpolate,
    mtst_transfer,
    sample_dirichlet,
    task_style_stats,
)
from taml.diffcore import ParamSet, Tape, Tensor, backward, finite_diff_check
from taml.theorylab import mean_with_se, variance_with_se

LAYOUT = TaskLayout(3, 1, 2)  # 9 rows


def fm_params(c, w=0.0, layer=1):
    ps = ParamSet()
    init_fm_params(ps, {layer: c}, w)
    return ps


def tasks(rng, n=4, c=5, layout=LAYOUT):
    return [Tensor(rng.normal(size=(layout.rows, c)) * rng.uniform(0.5, 2) + rng.normal()) for _ in range(n)]


# -- Dirichlet -------------------------------------------------------------------


def test_config_rejects_single_task():
    with pytest.raises(AugmentConfigError):
        sample_dirichlet(InterpolationConfig((0.5,)), np.random.default_rng(0))
    with pytest.raises(AugmentConfigError):
        InterpolationConfig((0.2, 0.0)).validate()


def test_uniform_simplex_moments():
    lam = dirichlet_draws([1.0, 1.0], 1_000_000, np.random.default_rng(0))[:, 0]
    m, v = mean_with_se(lam), variance_with_se(lam)
    assert m.agrees_with(0.5)
    assert v.agrees_with(1 / 12)


def test_four_way_variance():
    lam = dirichlet_draws([0.2] * 4, 1_000_000, np.random.default_rng(1))[:, 0]
    # gamma_1 (sum - gamma_1) / (sum^2 (sum + 1)) by hand
    assert variance_with_se(lam).agrees_with(0.2 * 0.6 / (0.64 * 1.8))


def test_tiny_concentration_stays_on_simplex():
    lam = dirichlet_draws([1e-3] * 3, 10_000, np.random.default_rng(2))
    assert np.all(np.isfinite(lam))
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)
    # near-vertex mass agrees with numpy's own sampler
    ref = np.random.default_rng(3).dirichlet([1e-3] * 3, 10_000)
    p, q = np.mean(lam.max(axis=1) > 0.999), np.mean(ref.max(axis=1) > 0.999)
    assert abs(p - q) < 4 * math.sqrt(2 * q * (1 - q) / 10_000)


def test_underflow_guard_gives_up():
    class Zeros:
        def standard_gamma(self, shape, size):
            return np.zeros(size)

        def random(self, size):
            return np.full(size, 0.5)

    with pytest.raises(dc.NumericError, match="100"):
        dirichlet_draws([2.0, 2.0], 3, Zeros())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 50), min_size=2, max_size=6), st.integers(0, 2**31))
def test_simplex_property(gamma, seed):
    w = sample_dirichlet(InterpolationConfig(tuple(gamma)), np.random.default_rng(seed))
    assert np.all(w.lam >= 0)
    assert abs(w.lam.sum() - 1) <= 1e-12


def test_mixweights_checked():
    with pytest.raises(dc.NumericError):
        MixWeights(np.array([0.5, 0.6]))


# -- interpolation ----------------------------------------------------------------


def test_mti_arithmetic():
    out, _ = mti_interpolate([Tensor([[1.0, 1.0]]), Tensor([[2.0, 2.0]])], MixWeights(np.array([0.3, 0.7])))
    np.testing.assert_allclose(out.data, [[1.7, 1.7]], rtol=0, atol=1e-15)


def test_mti_vertex_is_exact(rng):
    ts = tasks(rng, 3)
    out, _ = mti_interpolate(ts, MixWeights(np.array([1.0, 0.0, 0.0])))
    np.testing.assert_array_equal(out.data, ts[0].data)


def test_mti_mean_linearity(rng):
    ts = tasks(rng, 3)
    w = sample_dirichlet(InterpolationConfig.uniform(3), rng)
    out, _ = mti_interpolate(ts, w)
    expected = sum(l * t.data.mean(axis=0) for l, t in zip(w.lam, ts))
    np.testing.assert_allclose(task_style_stats(out, 1).mean.data, expected, atol=1e-12)


def test_mti_contract_errors(rng):
    w = MixWeights(np.array([0.5, 0.5]))
    with pytest.raises(AugmentConfigError, match="shapes"):
        mti_interpolate([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], w)
    with pytest.raises(AugmentConfigError, match="layouts"):
        mti_interpolate(tasks(rng, 2), w, [LAYOUT, TaskLayout(3, 2, 1)])
    _, labels = mti_interpolate(tasks(rng, 2), w, [LAYOUT, LAYOUT])
    assert labels == [0, 1, 2, 0, 0, 1, 1, 2, 2]


# -- style statistics and transfer --------------------------------------------------


def test_style_stats_values():
    s = task_style_stats(Tensor([[1.0, 3.0], [3.0, 5.0]]), 2)
    np.testing.assert_array_equal(s.mean.data, [2, 4])
    np.testing.assert_array_equal(s.var.data, [1, 1])
    with pytest.raises(ValueError):
        task_style_stats(Tensor(np.zeros((0, 2))), 1)


def test_style_stats_of_standardized(rng):
    x = rng.normal(size=(30, 4))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    s = task_style_stats(Tensor(x), 1)
    np.testing.assert_allclose(s.mean.data, 0, atol=1e-12)
    np.testing.assert_allclose(s.var.data, 1, atol=1e-12)


def test_transfer_to_own_style_is_identity(rng):
    x = tasks(rng, 1)[0]
    s = task_style_stats(x, 1)
    out, _ = mtst_transfer(x, s, s)
    np.testing.assert_allclose(out.data, x.data, rtol=0, atol=1e-10)


def test_transfer_exactness_100_tasks(rng):
    for _ in range(100):
        a, b = tasks(rng, 2, c=8)
        sa, sb = task_style_stats(a, 1), task_style_stats(b, 1)
        out, _ = mtst_transfer(a, sa, sb, eps=0.0)
        so = task_style_stats(out, 1)
        np.testing.assert_allclose(so.mean.data, sb.mean.data, rtol=0, atol=1e-8)
        np.testing.assert_allclose(so.var.data, sb.var.data, rtol=0, atol=1e-8)


def test_transfer_constant_channel(rng):
    x = rng.normal(size=(9, 3))
    x[:, 1] = 4.0
    target = task_style_stats(Tensor(rng.normal(size=(9, 3)) + 2), 1)
    out, _ = mtst_transfer(Tensor(x), task_style_stats(Tensor(x), 1), target, eps=1e-5)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[:, 1], target.mean.data[1], atol=1e-12)


def test_transfer_contract_errors(rng):
    x = tasks(rng, 1, c=3)[0]
    s = task_style_stats(x, 1)
    with pytest.raises(AugmentConfigError, match="layer"):
        mtst_transfer(x, s, task_style_stats(x, 2))
    with pytest.raises(AugmentConfigError, match="channel"):
        mtst_transfer(x, s, task_style_stats(Tensor(np.ones((4, 5))), 1))


# -- feature modulation ------------------------------------------------------------


def test_fm_identity_limit(rng):
    a, b = fm_sample(fm_params(6, -40.0), 1, rng)
    assert np.max(np.abs(a.data)) < 1e-15 and np.max(np.abs(b.data)) < 1e-15


def test_fm_std_is_softplus():
    # one call draws one alpha per channel: a million channels, a million draws
    a, _ = fm_sample(fm_params(1_000_000, 0.0), 1, np.random.default_rng(7))
    est = variance_with_se(a.data)
    sd = math.sqrt(est.value)
    assert abs(sd - math.log(2)) <= 3 * est.se / (2 * sd)


def test_fm_missing_layer(rng):
    with pytest.raises(KeyError):
        fm_sample(fm_params(3), 2, rng)


def test_fm_apply_arithmetic(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    z = Tensor(np.zeros(3))
    np.testing.assert_array_equal(fm_apply(x, z, z).data, x.data)
    np.testing.assert_array_equal(fm_apply(x, Tensor(np.ones(3)), z).data, 2 * x.data)
    out = fm_apply(Tensor([[1.0, 2.0]]), Tensor([0.5, -0.5]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [[2.5, 2.0]])


def test_fm_gradient_frozen_noise(rng):
    x = rng.normal(size=(6, 4))
    ps = fm_params(4, 0.3)
    ps[fm_paths(1)[0]].data[:] = rng.normal(size=4)

    def loss(p):
        a, b = fm_sample(p, 1, np.random.default_rng(11))  # same noise on every call
        y = fm_apply(Tensor(x), a, b)
        return dc.tsum(dc.mul(y, y))

    assert finite_diff_check(loss, ps) < 1e-5


# -- the composite ---------------------------------------------------------------------


def test_full_batch_layout(rng):
    ps = fm_params(5)
    batch = build_augmented_batch(tasks(rng), LAYOUT, AugmentConfig(), ps, 1, rng)
    assert len(batch.tasks) == 5
    assert [t.kind for t in batch.tasks] == ["interpolated"] + ["transferred"] * 4
    assert [t.source for t in batch.tasks[1:]] == [0, 1, 2, 3]
    assert len(batch.chosen) == 3 and len(set(batch.chosen)) == 3
    for t in batch.tasks:
        assert t.layer == 1
        assert t.labels == LAYOUT.labels()


def test_transferred_tasks_share_mixed_style(rng):
    feats = tasks(rng)
    cfg = AugmentConfig(use_fm=False, eps=0.0)
    batch = build_augmented_batch(feats, LAYOUT, cfg, None, 1, rng)
    mix = task_style_stats(batch.tasks[0].features, 1)
    for t in batch.tasks[1:]:
        s = task_style_stats(t.features, 1)
        np.testing.assert_allclose(s.mean.data, mix.mean.data, atol=1e-8)
        np.testing.assert_allclose(s.var.data, mix.var.data, atol=1e-8)


def test_too_few_tasks(rng):
    cfg = AugmentConfig(interp=InterpolationConfig.uniform(3))
    with pytest.raises(AugmentConfigError):
        build_augmented_batch(tasks(rng, 2), LAYOUT, cfg, fm_params(5), 1, rng)


def test_identity_composite(rng):
    feats = tasks(rng)
    cfg = AugmentConfig(force_identity_style=True)
    batch = build_augmented_batch(feats, LAYOUT, cfg, fm_params(5, -40.0), 1, rng)
    assert len(batch.tasks) == 4
    for t, x in zip(batch.tasks, feats):
        np.testing.assert_allclose(t.features.data, x.data, rtol=0, atol=1e-10)


def test_batch_determinism():
    def run():
        rng = np.random.default_rng(3)
        return build_augmented_batch(tasks(rng), LAYOUT, AugmentConfig(), fm_params(5, 0.1), 1, rng)

    a, b = run(), run()
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.features.data.tobytes() == tb.features.data.tobytes()


def test_ablation_shapes(rng):
    feats = tasks(rng)
    only_mti = build_augmented_batch(feats, LAYOUT, AugmentConfig(use_mtst=False, use_fm=False), None, 1, rng)
    assert [t.kind for t in only_mti.tasks] == ["interpolated"]
    none = build_augmented_batch(feats, LAYOUT, AugmentConfig(use_mti=False, use_mtst=False, use_fm=False), None, 1, rng)
    assert [t.kind for t in none.tasks] == ["original"] * 4
    for t, x in zip(none.tasks, feats):
        assert t.features is x
    with pytest.raises(AugmentConfigError):
        build_augmented_batch(feats, LAYOUT, AugmentConfig(), None, 1, rng)


def test_no_interpolation_moves_every_task_to_one_style(rng):
    feats = tasks(rng)
    cfg = AugmentConfig(use_mti=False, use_fm=False, eps=0.0)
    batch = build_augmented_batch(feats, LAYOUT, cfg, None, 1, rng)
    assert [t.kind for t in batch.tasks] == ["transferred"] * 4
    (k,) = batch.chosen
    target = task_style_stats(feats[k], 1)
    for t in batch.tasks:
        s = task_style_stats(t.features, 1)
        np.testing.assert_allclose(s.mean.data, target.mean.data, atol=1e-8)
        np.testing.assert_allclose(s.var.data, target.var.data, atol=1e-8)


def test_composite_gradient(rng):
    feats = [rng.normal(size=(LAYOUT.rows, 4)) * s for s in (1.0, 2.0, 0.5, 1.5)]
    ps = fm_params(4, 0.2)
    for i, f in enumerate(feats):
        ps[f"x{i}"] = Tensor(f)
    weights = rng.normal(size=(LAYOUT.rows, 4))

    def loss(p):
        rng_fixed = np.random.default_rng(5)  # frozen augmentation randomness
        batch = build_augmented_batch([p[f"x{i}"] for i in range(4)], LAYOUT, AugmentConfig(), p, 1, rng_fixed)
        total = None
        for t in batch.tasks:
            term = dc.tsum(dc.mul(dc.softplus(t.features), weights))
            total = term if total is None else dc.add(total, term)
        return total

    assert finite_diff_check(loss, ps, max_coords=400) < 1e-4


def test_stopgrad_blocks_stat_gradient(rng):
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    target = task_style_stats(Tensor(rng.normal(size=(6, 3))), 1)
    for stop, expect_zero in [(False, True), (True, False)]:
        x.grad = None
        with Tape() as tape:
            s = task_style_stats(x, 1)
            s = s.detached() if stop else s
            out, _ = mtst_transfer(x, s, target)
            loss = dc.tsum(out)
        backward(tape, loss)
        # full gradient of a sum of re-standardized rows vanishes; detaching stats breaks that
        assert (np.max(np.abs(x.grad)) < 1e-8) == expect_zero
