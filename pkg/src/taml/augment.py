"""Task augmentation: multi-task interpolation, style transfer, feature modulation.

Everything here operates on layer features of whole tasks (support rows then
query rows, both class-major) and is differentiable through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import (
    NumericError,
    ParamSet,
    Tensor,
    add,
    detach,
    div,
    moments,
    mul,
    softplus,
    sqrt,
    sub,
)
from .worldgen import canonical_labels


class AugmentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskLayout:
    n_way: int
    k_shot: int
    k_query: int

    @property
    def rows(self) -> int:
        return self.n_way * (self.k_shot + self.k_query)

    def labels(self) -> list[int]:
        """Fresh episode-local labels for a task with this layout."""
        return canonical_labels(self.n_way, self.k_shot) + canonical_labels(self.n_way, self.k_query)


@dataclass(frozen=True)
class InterpolationConfig:
    gamma: tuple[float, ...]

    @property
    def m(self) -> int:
        return len(self.gamma)

    @classmethod
    def uniform(cls, m: int, value: float = 0.2) -> "InterpolationConfig":
        return cls(tuple([value] * m))

    def validate(self, n_tasks: int | None = None) -> None:
        if self.m < 2:
            raise AugmentConfigError(f"need m >= 2 tasks to interpolate, got gamma of length {self.m}")
        if any(not g > 0 for g in self.gamma):
            raise AugmentConfigError("Dirichlet concentrations must be strictly positive")
        if n_tasks is not None and self.m > n_tasks:
            raise AugmentConfigError(f"m={self.m} exceeds the {n_tasks} available tasks")


@dataclass(frozen=True)
class MixWeights:
    lam: np.ndarray

    def __post_init__(self):
        lam = self.lam
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-12:
            raise NumericError(f"mixing weights off the simplex: {lam}")


def dirichlet_draws(gamma: Sequence[float], size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` Dirichlet(gamma) draws as rows of a [size, m] array.

    Gamma variates with shape below one are boosted, Gamma(a+1) * U**(1/a),
    and the whole construction runs in log space so tiny concentrations do
    not underflow every component at once.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    boosted = gamma < 1.0
    shape = np.where(boosted, gamma + 1.0, gamma)
    for _ in range(100):
        g = rng.standard_gamma(shape, size=(size, gamma.size))
        u = 1.0 - rng.random((size, gamma.size))  # in (0, 1]
        with np.errstate(divide="ignore"):
            logg = np.log(g) + np.where(boosted, np.log(u) / gamma, 0.0)
        top = logg.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(top)):
            continue
        w = np.exp(logg - top)
        return w / w.sum(axis=1, keepdims=True)
    raise NumericError("Dirichlet sampling underflowed 100 times in a row")


def sample_dirichlet(config: InterpolationConfig, rng: np.random.Generator) -> MixWeights:
    config.validate()
    return MixWeights(dirichlet_draws(config.gamma, 1, rng)[0])


def mti_interpolate(
    features: Sequence[Tensor],
    weights: MixWeights,
    layouts: Sequence[TaskLayout] | None = None,
) -> tuple[Tensor, list[int]]:
    """Row-aligned convex combination of task features, with fresh labels."""
    if len(features) != len(weights.lam):
        raise AugmentConfigError(f"{len(features)} tasks but {len(weights.lam)} weights")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise AugmentConfigError(f"task feature shapes differ: {shape} vs {f.shape}")
    if layouts is not None:
        if any(lay != layouts[0] for lay in layouts) or len(layouts) != len(features):
            raise AugmentConfigError("tasks have different (N, Ks, Kq) layouts")
        if layouts[0].rows != shape[0]:
            raise AugmentConfigError(f"layout expects {layouts[0].rows} rows, features have {shape[0]}")
        labels = layouts[0].labels()
    else:
        labels = []
    mixed = mul(features[0], float(weights.lam[0]))
    for f, w in zip(features[1:], weights.lam[1:]):
        mixed = add(mixed, mul(f, float(w)))
    return mixed, labels


@dataclass
class StyleStats:
    layer: int
    mean: Tensor
    var: Tensor

    def detached(self) -> "StyleStats":
        return StyleStats(self.layer, detach(self.mean), detach(self.var))


def task_style_stats(features: Tensor, layer: int) -> StyleStats:
    """Per-channel mean and population variance over every row of the task."""
    mean, var = moments(features)
    return StyleStats(layer, mean, var)


def mtst_transfer(
    x: Tensor,
    stats_src: StyleStats,
    stats_mix: StyleStats,
    eps: float = 1e-5,
    layout: TaskLayout | None = None,
) -> tuple[Tensor, list[int]]:
    """Re-standardize ``x`` from its own style to ``stats_mix``."""
    if stats_src.layer != stats_mix.layer:
        raise AugmentConfigError(f"layer mismatch: {stats_src.layer} vs {stats_mix.layer}")
    c = x.shape[1]
    if stats_src.mean.shape != (c,) or stats_mix.mean.shape != (c,):
        raise AugmentConfigError(
            f"channel mismatch: features have {c}, stats have "
            f"{stats_src.mean.shape} and {stats_mix.mean.shape}"
        )
    normed = div(sub(x, stats_src.mean), sqrt(add(stats_src.var, eps)))
    out = add(mul(normed, sqrt(add(stats_mix.var, eps))), stats_mix.mean)
    return out, (layout.labels() if layout is not None else [])


# -- feature modulation -------------------------------------------------------


def fm_paths(layer: int) -> tuple[str, str]:
    return f"fm.alpha.l{layer}", f"fm.beta.l{layer}"


def init_fm_params(params: ParamSet, widths: dict[int, int], init: float = 0.0) -> None:
    for layer, c in sorted(widths.items()):
        pa, pb = fm_paths(layer)
        params[pa] = Tensor(np.full(c, init))
        params[pb] = Tensor(np.full(c, init))


def fm_sample(params: ParamSet, layer: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Reparameterized draw of the task-shared scale and shift perturbations.

    softplus(W) is the standard deviation; the standard-normal noise is drawn
    here and held fixed, so gradients reach W through the scale factor.
    """
    pa, pb = fm_paths(layer)
    if pa not in params:
        raise KeyError(f"layer {layer} has no feature-modulation parameters")
    w_a, w_b = params[pa], params[pb]
    eps_a = rng.standard_normal(w_a.shape)
    eps_b = rng.standard_normal(w_b.shape)
    return mul(softplus(w_a), eps_a), mul(softplus(w_b), eps_b)


def fm_apply(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """x + alpha * x + beta, the same affine map for every row of the task."""
    if alpha.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise AugmentConfigError(f"modulation width {alpha.shape} does not match features {x.shape}")
    return add(add(x, mul(alpha, x)), beta)


# -- the composite ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    interp: InterpolationConfig = field(default_factory=lambda: InterpolationConfig.uniform(3))
    use_mti: bool = True
    use_mtst: bool = True
    use_fm: bool = True
    stopgrad_stats: bool = False
    eps: float = 1e-5
    # test hook: every task is "transferred" to its own style, no interpolated task
    force_identity_style: bool = False


@dataclass
class AugmentedTask:
    features: Tensor
    labels: list[int]
    layer: int
    kind: str  # "interpolated", "transferred", "original"
    source: int | None = None


@dataclass
class AugmentedTaskBatch:
    tasks: list[AugmentedTask]
    layer: int
    chosen: list[int] = field(default_factory=list)
    weights: np.ndarray | None = None


def build_augmented_batch(
    layer_features: Sequence[Tensor],
    layout: TaskLayout,
    config: AugmentConfig,
    params: ParamSet | None,
    layer: int,
    rng: np.random.Generator,
) -> AugmentedTaskBatch:
    """Generate the new tasks for one iteration from ``n`` original tasks.

    Full configuration: pick m of the n tasks, interpolate them, transfer all
    n originals to the interpolated style, then modulate each of the n+1 new
    tasks with its own feature-modulation draw.  Switching off interpolation
    transfers every task to the style of one randomly chosen task;
    switching off style transfer keeps only the interpolated task; switching
    off both leaves the originals (still modulated if modulation is on).
    """
    n = len(layer_features)
    labels = layout.labels()

    def stats_of(x: Tensor) -> StyleStats:
        s = task_style_stats(x, layer)
        return s.detached() if config.stopgrad_stats else s

    new: list[AugmentedTask] = []
    chosen: list[int] = []
    lam = None
    if config.force_identity_style:
        for j, x in enumerate(layer_features):
            s = stats_of(x)
            xt, _ = mtst_transfer(x, s, s, config.eps)
            new.append(AugmentedTask(xt, labels, layer, "transferred", j))
    elif config.use_mti:
        config.interp.validate(n)
        chosen = sorted(rng.choice(n, size=config.interp.m, replace=False).tolist())
        w = sample_dirichlet(config.interp, rng)
        lam = w.lam
        x_mix, _ = mti_interpolate([layer_features[j] for j in chosen], w)
        new.append(AugmentedTask(x_mix, labels, layer, "interpolated"))
        if config.use_mtst:
            s_mix = stats_of(x_mix)
            for j, x in enumerate(layer_features):
                xt, _ = mtst_transfer(x, stats_of(x), s_mix, config.eps)
                new.append(AugmentedTask(xt, labels, layer, "transferred", j))
    elif config.use_mtst:
        # a one-hot mix: every task takes the style of one random task
        k = int(rng.integers(n))
        chosen = [k]
        s_k = stats_of(layer_features[k])
        for j, x in enumerate(layer_features):
            xt, _ = mtst_transfer(x, stats_of(x), s_k, config.eps)
            new.append(AugmentedTask(xt, labels, layer, "transferred", j))
    else:
        for j, x in enumerate(layer_features):
            new.append(AugmentedTask(x, labels, layer, "original", j))

    if config.use_fm:
        if params is None:
            raise AugmentConfigError("feature modulation needs FM parameters")
        for t in new:
            alpha, beta = fm_sample(params, layer, rng)
            t.features = fm_apply(t.features, alpha, beta)
    return AugmentedTaskBatch(new, layer, chosen, lam)
