"""Monte-Carlo checks of the closed-form results behind the augmentation.

Covers the Beta/Dirichlet mixing-weight variances, the concentration sweep,
the law-of-total-variance split of augmented-feature covariance, and the
variance identity for feature-modulated features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .augment import AugmentConfig, dirichlet_draws
from .worldgen import Benchmark, make_benchmark, sample_task


def _check_positive(*vals: float) -> None:
    for v in vals:
        if not v > 0:
            raise ValueError(f"parameters must be strictly positive, got {v}")


def beta_pair_variance(alpha: float, beta: float) -> float:
    _check_positive(alpha, beta)
    s = alpha + beta
    return alpha * beta / (s * s * (s + 1.0))


def dirichlet_component_variance(gamma: Sequence[float]) -> float:
    """Variance of the first component of a Dirichlet(gamma) draw."""
    _check_positive(*gamma)
    g1 = float(gamma[0])
    total = float(np.sum(gamma))
    return g1 * (total - g1) / (total * total * (total + 1.0))


@dataclass
class MCEstimate:
    value: float
    se: float
    n: int

    def agrees_with(self, exact: float, n_se: float = 3.0) -> bool:
        return abs(self.value - exact) <= n_se * self.se


def variance_with_se(x: np.ndarray) -> MCEstimate:
    """Sample variance and its delta-method standard error, sqrt((m4 - s^4) / n)."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    s2 = float(np.mean(c * c))
    m4 = float(np.mean(c**4))
    return MCEstimate(s2, float(np.sqrt(max(m4 - s2 * s2, 0.0) / len(x))), len(x))


def mean_with_se(x: np.ndarray) -> MCEstimate:
    x = np.asarray(x, dtype=np.float64)
    return MCEstimate(float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x))), len(x))


def mc_beta_variance(alpha: float, beta: float, n: int, seed: int = 0) -> MCEstimate:
    """MC variance of Beta draws from numpy's own sampler (independent of ours)."""
    rng = np.random.default_rng(seed)
    return variance_with_se(rng.beta(alpha, beta, size=n))


def mc_dirichlet_variance(gamma: Sequence[float], n: int, seed: int = 0) -> MCEstimate:
    rng = np.random.default_rng(seed)
    return variance_with_se(dirichlet_draws(gamma, n, rng)[:, 0])


def mti_beta_ks(a: float, n: int = 100_000, seed: int = 0) -> float:
    """Two-sample KS statistic: first Dirichlet([a, a]) weight vs Beta(a, a) draws."""
    rng = np.random.default_rng(seed)
    lam = dirichlet_draws([a, a], n, rng)[:, 0]
    pair = np.random.default_rng(seed + 1).beta(a, a, size=n)
    return float(stats.ks_2samp(lam, pair).statistic)


def pair_vs_multi_comparison(alpha: float = 0.2, gamma: Sequence[float] = (0.2, 0.2, 0.2)) -> dict:
    """Pairwise (Beta) vs multi-task (Dirichlet) weight variance, both reported as computed."""
    vb = beta_pair_variance(alpha, alpha)
    vd = dirichlet_component_variance(gamma)
    return {
        "beta_alpha": alpha,
        "dirichlet_gamma": list(gamma),
        "beta_pair_variance": vb,
        "dirichlet_component_variance": vd,
        "beta_le_dirichlet": vb <= vd,
    }


# -- concentration sweep --------------------------------------------------------


@dataclass
class SweepResult:
    gamma_grid: list[float]
    e_max_lambda: list[float]
    var_lambda: list[float]
    e_max_se: list[float]
    var_se: list[float]
    n_samples: int
    m: int

    def monotone(self, values: str, slack_se: float = 2.0) -> bool:
        v = np.asarray(getattr(self, values))
        se = np.asarray(self.e_max_se if values == "e_max_lambda" else self.var_se)
        steps = v[1:] - v[:-1]
        allowed = slack_se * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
        return bool(np.all(steps <= allowed))


def gamma_sweep(grid: Sequence[float], m: int, n_samples: int, seed: int = 0) -> SweepResult:
    """E[max lambda] and Var[lambda_1] under Dirichlet(gamma * ones(m)) for each gamma."""
    _check_positive(*grid)
    if m < 2:
        raise ValueError("m must be >= 2")
    emax, var, emax_se, var_se = [], [], [], []
    for k, g in enumerate(grid):
        lam = dirichlet_draws([g] * m, n_samples, np.random.default_rng([seed, k]))
        e = mean_with_se(lam.max(axis=1))
        v = variance_with_se(lam[:, 0])
        emax.append(e.value)
        emax_se.append(e.se)
        var.append(v.value)
        var_se.append(v.se)
    return SweepResult([float(g) for g in grid], emax, var, emax_se, var_se, n_samples, m)


# -- law of total variance ----------------------------------------------------------


@dataclass
class CovCheck:
    total_cov: np.ndarray
    expected_conditional_cov: np.ndarray
    cov_of_conditional_mean: np.ndarray
    residual_frobenius: float
    se_bound: float
    min_eig_cov_of_mean: float
    n_mc: int
    extra: dict = field(default_factory=dict)

    def within_noise(self, k: float = 5.0) -> bool:
        return self.residual_frobenius < k * self.se_bound

    def symmetric(self, tol: float = 1e-10) -> bool:
        return all(
            np.max(np.abs(a - a.T)) <= tol
            for a in (self.total_cov, self.expected_conditional_cov, self.cov_of_conditional_mean)
        )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def augment_task_draws(
    feats: np.ndarray,
    j: int,
    k: int,
    config: AugmentConfig,
    fm_w: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    """``k`` independent augmented versions of task ``j``, shape [k, R, C].

    Vectorized replay of the per-task path of the augmentation: transfer to
    the style of a Dirichlet mix of m random tasks, then feature modulation.
    """
    n, r, c = feats.shape
    x = np.broadcast_to(feats[j], (k, r, c))
    out = x
    if config.use_mtst and config.use_mti:
        m = config.interp.m
        chosen = np.sort(np.argsort(rng.random((k, n)), axis=1)[:, :m], axis=1)
        lam = dirichlet_draws(config.interp.gamma, k, rng)
        mixed = np.einsum("km,kmrc->krc", lam, feats[chosen])
        mu_mix, var_mix = mixed.mean(axis=1, keepdims=True), mixed.var(axis=1, keepdims=True)
        mu_j, var_j = feats[j].mean(axis=0), feats[j].var(axis=0)
        out = (x - mu_j) / np.sqrt(var_j + config.eps) * np.sqrt(var_mix + config.eps) + mu_mix
    if config.use_fm:
        s_a, s_b = _softplus(fm_w[0]), _softplus(fm_w[1])
        alpha = s_a * rng.standard_normal((k, 1, c))
        beta = s_b * rng.standard_normal((k, 1, c))
        out = out + alpha * out + beta
    return np.array(out)


def default_theory_features(n_tasks: int = 4, seed: int = 0) -> np.ndarray:
    """One 2-way 1-shot (4 query) task per source domain of the default benchmark, raw inputs."""
    bench: Benchmark = make_benchmark()
    rng = np.random.default_rng(seed)
    src = bench.source
    return np.stack(
        [sample_task(src[i % len(src)], 2, 1, 4, rng).features() for i in range(n_tasks)]
    )


def total_variance_check(
    features: np.ndarray,
    config: AugmentConfig,
    n_mc: int,
    fm_w: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    batches: int = 10,
) -> CovCheck:
    """Split Cov(X_new) into E[Cov(X_new | x)] + Cov(E[X_new | x]) by Monte Carlo.

    The conditioning variable is the original sample (task j, row i), uniform
    over all rows of all tasks.  Each term is estimated from its own draws
    with unbiased estimators, so the residual of the identity is pure MC
    noise; ``se_bound`` is the Frobenius norm of its per-entry standard error
    across ``batches`` independent replications.
    """
    n, r, c = features.shape
    if fm_w is None:
        fm_w = (np.zeros(c), np.zeros(c))
    n_cond = n * r
    per_batch = max(n_mc // batches, n_cond * 2)
    k = max(per_batch // n_cond, 2)
    tot_b, cond_b, mean_b, res_b = [], [], [], []
    for b in range(batches):
        rng = np.random.default_rng([seed, b])
        # unconditional: (j, i) uniform, then augmentation
        js = rng.integers(n, size=per_batch)
        is_ = rng.integers(r, size=per_batch)
        samples = np.empty((per_batch, c))
        for j in range(n):
            sel = np.flatnonzero(js == j)
            if sel.size:
                draws = augment_task_draws(features, j, sel.size, config, fm_w, rng)
                samples[sel] = draws[np.arange(sel.size), is_[sel]]
        total = np.cov(samples, rowvar=False, ddof=1)
        # conditional on each (j, i): k independent augmentations
        means = np.empty((n_cond, c))
        within = np.zeros((c, c))
        for j in range(n):
            for i in range(r):
                draws = augment_task_draws(features, j, k, config, fm_w, rng)[:, i, :]
                means[j * r + i] = draws.mean(axis=0)
                within += np.cov(draws, rowvar=False, ddof=1)
        within /= n_cond
        centred = means - means.mean(axis=0)
        between = centred.T @ centred / n_cond - (1.0 - 1.0 / n_cond) * within / k
        tot_b.append(total)
        cond_b.append(within)
        mean_b.append(between)
        res_b.append(total - within - between)
    total = np.mean(tot_b, axis=0)
    within = np.mean(cond_b, axis=0)
    between = np.mean(mean_b, axis=0)
    sym = lambda a: 0.5 * (a + a.T)  # noqa: E731
    total, within, between = sym(total), sym(within), sym(between)
    residual = total - within - between
    se = np.std(res_b, axis=0, ddof=1) / np.sqrt(batches)
    return CovCheck(
        total_cov=total,
        expected_conditional_cov=within,
        cov_of_conditional_mean=between,
        residual_frobenius=float(np.linalg.norm(residual)),
        se_bound=float(np.linalg.norm(se)),
        min_eig_cov_of_mean=float(np.linalg.eigvalsh(between).min()),
        n_mc=per_batch * batches,
        extra={"draws_per_condition": k * batches},
    )


# -- modulated-feature variance -----------------------------------------------------


@dataclass
class RegTrace:
    closed_form: float
    empirical: MCEstimate
    rel_gap: float


def regularizer_trace(
    features: np.ndarray,
    w_alpha: float,
    n_draws: int = 1_000_000,
    theta: float = 1.0,
    seed: int = 0,
) -> RegTrace:
    """Closed form vs MC variance of the scale-modulation term on one channel.

    With alpha ~ N(0, softplus(w_alpha)^2) independent of the feature x, the
    modulation adds theta * alpha * x whose variance is
    theta^2 * (mean(x)^2 + var(x)) * softplus(w_alpha)^2.
    """
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    mu, var = float(x.mean()), float(x.var())
    s = float(_softplus(np.array(w_alpha)))
    closed = theta * theta * (mu * mu + var) * s * s
    rng = np.random.default_rng(seed)
    xs = x[rng.integers(len(x), size=n_draws)]
    alpha = s * rng.standard_normal(n_draws)
    # modulated minus original with the shift term held at zero
    modulated = (xs + alpha * xs) - xs
    est = variance_with_se(theta * modulated)
    denom = max(abs(closed), abs(est.value), 1e-300)
    return RegTrace(closed, est, abs(est.value - closed) / denom)
