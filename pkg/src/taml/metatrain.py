"""Two-stage online meta-training, evaluation and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .augment import (
    AugmentConfig,
    InterpolationConfig,
    TaskLayout,
    build_augmented_batch,
    dirichlet_draws,
    fm_paths,
    mti_interpolate,
    MixWeights,
    mtst_transfer,
    task_style_stats,
)
from .diffcore import (
    SGD,
    Adam,
    NumericError,
    ParamSet,
    Tape,
    Tensor,
    affine,
    backward,
    concat,
    cross_entropy,
    rows,
)
from .model import (
    EncoderConfig,
    HeadConfig,
    ModelConfig,
    batched_task_losses,
    encode,
    encode_from_layer,
    encode_to_layer,
    init_params,
    predict,
)
from .rng import stream
from .worldgen import Benchmark, BenchmarkSpec, Domain, EpisodeTask, pooled_source_data, sample_task

METRICS_SCHEMA = "metrics_v1"


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, stage: str, detail: str):
        super().__init__(f"non-finite value at iteration {iteration} during {stage}: {detail}")
        self.iteration = iteration
        self.stage = stage


@dataclass(frozen=True)
class TrainConfig:
    n_tasks_per_iter: int = 4
    m: int = 3
    gamma: tuple[float, ...] | None = None  # None -> all 0.2, length m
    lr: float = 0.001
    optimizer: str = "adam"
    iterations: int = 2000
    n_way: int = 5
    k_shot: int = 1
    k_query: int = 15
    widths: tuple[int, ...] = (64, 64, 64, 64)
    eligible_layers: tuple[int, ...] = (1, 2)
    head: str = "matching_cosine"
    tau_init: float = 10.0
    fm_init: float = 0.0
    use_mti: bool = True
    use_mtst: bool = True
    use_fm: bool = True
    stopgrad_stats: bool = False
    force_identity_style: bool = False
    seed: int = 0
    eval_episodes: int = 1000
    eval_interval: int = 0  # 0: evaluate only after the last iteration
    style_tasks: int = 100
    pretrain_epochs: int = 0
    pretrain_per_class: int = 30
    record_timing: bool = False

    def resolved_gamma(self) -> tuple[float, ...]:
        return tuple(self.gamma) if self.gamma is not None else tuple([0.2] * self.m)

    def validate(self) -> None:
        if not 2 <= self.m <= self.n_tasks_per_iter:
            raise ValueError(f"need 2 <= m <= n, got m={self.m}, n={self.n_tasks_per_iter}")
        if len(self.resolved_gamma()) != self.m or any(g <= 0 for g in self.resolved_gamma()):
            raise ValueError("gamma must hold m positive entries")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n_way < 2 or self.k_shot < 1 or self.k_query < 1:
            raise ValueError("need n_way >= 2, k_shot >= 1, k_query >= 1")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        self.model_config(1).validate()

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            EncoderConfig(input_dim, tuple(self.widths), tuple(self.eligible_layers)),
            HeadConfig(self.head, self.tau_init),
            self.fm_init,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            interp=InterpolationConfig(self.resolved_gamma()),
            use_mti=self.use_mti,
            use_mtst=self.use_mtst,
            use_fm=self.use_fm,
            stopgrad_stats=self.stopgrad_stats,
            force_identity_style=self.force_identity_style,
        )

    def layout(self) -> TaskLayout:
        return TaskLayout(self.n_way, self.k_shot, self.k_query)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


def model_paths(params: ParamSet) -> list[str]:
    """Encoder and head parameters, i.e. everything except feature modulation."""
    return params.subset(("encoder.", "head."))


# -- the two stages -----------------------------------------------------------


def _task_inputs(task: EpisodeTask) -> Tensor:
    return Tensor(task.features())


def source_loss(tasks: Sequence[EpisodeTask], params: ParamSet, mcfg: ModelConfig, layout: TaskLayout) -> Tensor:
    losses = batched_task_losses(
        [_task_inputs(t) for t in tasks], layout, [t.labels() for t in tasks], params, mcfg
    )
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def stage1_update(
    tasks: Sequence[EpisodeTask], params: ParamSet, opt, mcfg: ModelConfig, layout: TaskLayout
) -> float:
    """One step on the original tasks; feature-modulation parameters are not touched."""
    params.zero_grad()
    with Tape() as tape:
        loss = source_loss(tasks, params, mcfg, layout)
    backward(tape, loss)
    opt.step(params, model_paths(params))
    params.zero_grad()
    return float(loss.data)


def augmented_loss(
    tasks: Sequence[EpisodeTask],
    params: ParamSet,
    mcfg: ModelConfig,
    acfg: AugmentConfig,
    layout: TaskLayout,
    rng: np.random.Generator,
) -> tuple[Tensor, int]:
    """Mean query loss over the augmented tasks built at a randomly chosen layer."""
    eligible = mcfg.encoder.eligible_layers
    layer = eligible[int(rng.integers(len(eligible)))]
    x = concat([_task_inputs(t) for t in tasks], axis=0)
    h = encode_to_layer(x, layer, params, mcfg)
    r = layout.rows
    per_task = [rows(h, i * r, (i + 1) * r) for i in range(len(tasks))]
    batch = build_augmented_batch(per_task, layout, acfg, params, layer, rng)
    losses = batched_task_losses(
        [t.features for t in batch.tasks],
        layout,
        [t.labels for t in batch.tasks],
        params,
        mcfg,
        start_layer=layer,
    )
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses)), layer


def stage2_update(
    tasks: Sequence[EpisodeTask],
    params: ParamSet,
    opt,
    mcfg: ModelConfig,
    acfg: AugmentConfig,
    layout: TaskLayout,
    rng: np.random.Generator,
) -> float:
    """One joint step on encoder, head and feature-modulation parameters."""
    params.zero_grad()
    with Tape() as tape:
        loss, layer = augmented_loss(tasks, params, mcfg, acfg, layout, rng)
    backward(tape, loss)
    paths = model_paths(params)
    if acfg.use_fm:
        paths += list(fm_paths(layer))
    opt.step(params, paths)
    params.zero_grad()
    return float(loss.data)


# -- pretraining --------------------------------------------------------------


def pretrain(
    params: ParamSet,
    mcfg: ModelConfig,
    bench: Benchmark,
    epochs: int,
    rng: np.random.Generator,
    per_class: int = 30,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> list[float]:
    """Supervised encoder pretraining over all pooled source classes.

    A linear classifier is trained alongside and thrown away.  Returns the
    mean minibatch loss of every epoch.
    """
    if epochs <= 0:
        return []
    x, y, n_classes = pooled_source_data(bench, per_class, rng)
    width = mcfg.encoder.widths[-1]
    clf = ParamSet(
        {
            "clf.weight": Tensor(rng.standard_normal((width, n_classes)) * math.sqrt(1.0 / width)),
            "clf.bias": Tensor(np.zeros(n_classes)),
        }
    )
    enc_paths = params.subset(("encoder.",))
    opt = Adam(lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            params.zero_grad()
            clf.zero_grad()
            with Tape() as tape:
                emb = encode(Tensor(x[idx]), params, mcfg)
                loss = cross_entropy(affine(emb, clf["clf.weight"], clf["clf.bias"]), y[idx])
            backward(tape, loss)
            opt.step(params, enc_paths)
            opt.step(clf)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    params.zero_grad()
    return history


# -- evaluation and diagnostics -------------------------------------------------


def evaluate(
    params: ParamSet,
    mcfg: ModelConfig,
    domain: Domain,
    n_episodes: int,
    n_way: int,
    k_shot: int,
    seed: int,
    k_query: int = 15,
) -> tuple[float, float]:
    """Mean query accuracy and 95% CI half-width over fresh target episodes.

    Episode ``k`` always uses the stream (seed, domain, k), so results do not
    depend on evaluation order.  Parameters are never modified.
    """
    acc = np.empty(n_episodes)
    for k in range(n_episodes):
        task = sample_task(domain, n_way, k_shot, k_query, stream(seed, "eval", domain.domain_id, k))
        pred = predict(task, params, mcfg)
        acc[k] = np.mean(pred == np.asarray(task.query_y))
    return float(acc.mean()), ci_half_width(acc)


def ci_half_width(values: np.ndarray) -> float:
    """1.96 * sample std / sqrt(n); zero for a single value."""
    n = len(values)
    if n < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / math.sqrt(n))


def _rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    out = np.where((na > 0) & (nb > 0), dot / np.maximum(na * nb, 1e-300), 0.0)
    # two all-zero embeddings are the same point
    return np.where((na == 0) & (nb == 0), 1.0, out)


def style_invariance_score(
    params: ParamSet,
    mcfg: ModelConfig,
    domain_a: Domain,
    domain_b: Domain,
    n_tasks: int = 100,
    seed: int = 0,
    gamma: tuple[float, float] = (0.2, 0.2),
    layer: int | None = None,
    n_way: int = 5,
    k_shot: int = 1,
    k_query: int = 15,
    identity: bool = False,
) -> float:
    """Mean cosine similarity of output embeddings before and after style transfer.

    Each probe task from ``domain_a`` is re-styled at ``layer`` toward the
    statistics of its interpolation with a task from ``domain_b``.  With
    ``identity`` the target statistics are the task's own.
    """
    layer = layer if layer is not None else mcfg.encoder.eligible_layers[0]
    scores = []
    for k in range(n_tasks):
        rng = stream(seed, "style", domain_a.domain_id, domain_b.domain_id, k)
        ta = sample_task(domain_a, n_way, k_shot, k_query, rng)
        tb = sample_task(domain_b, n_way, k_shot, k_query, rng)
        ha = encode_to_layer(Tensor(ta.features()), layer, params, mcfg)
        stats_a = task_style_stats(ha, layer)
        if identity:
            stats_mix = stats_a
        else:
            hb = encode_to_layer(Tensor(tb.features()), layer, params, mcfg)
            lam = MixWeights(dirichlet_draws(gamma, 1, rng)[0])
            mixed, _ = mti_interpolate([ha, hb], lam)
            stats_mix = task_style_stats(mixed, layer)
        moved, _ = mtst_transfer(ha, stats_a, stats_mix)
        fa = encode_from_layer(ha, layer, params, mcfg).data
        fb = encode_from_layer(moved, layer, params, mcfg).data
        scores.append(float(np.mean(_rowwise_cosine(fa, fb))))
    return float(np.mean(scores))


# -- metrics ---------------------------------------------------------------------


@dataclass
class DomainEval:
    domain_id: int
    accuracy: float
    ci_half_width: float


@dataclass
class MetricsRecord:
    iteration: int
    L_SD: float
    L_AD: float
    eval: list[DomainEval]
    style_invariance: float
    wall_ms: float | None = None

    def to_json(self) -> str:
        d = {"schema": METRICS_SCHEMA, "kind": "record", **asdict(self)}
        return json.dumps(d, sort_keys=True)


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"TAMLCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    bench_spec: BenchmarkSpec
    params: ParamSet
    optimizer: dict[str, np.ndarray]
    iteration: int
    rng_state: dict
    version: int = CKPT_VERSION


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    blobs: list[tuple[str, str, np.ndarray]] = [("param", k, t.data) for k, t in ckpt.params.items()]
    blobs += [("optim", k, ckpt.optimizer[k]) for k in sorted(ckpt.optimizer)]
    entries, offset = [], 0
    for group, name, arr in blobs:
        nbytes = arr.size * 8
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "engine": __version__,
        "config": ckpt.config.to_dict(),
        "bench_spec": asdict(ckpt.bench_spec),
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
        "data_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(hbytes)))
        fh.write(hbytes)
        for _, _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a checkpoint")
    if len(raw) < 20:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(raw) < 20 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    data = raw[20 + hlen :]
    if len(data) != header["data_bytes"]:
        raise TruncatedCheckpointError(f"{path}: expected {header['data_bytes']} data bytes, found {len(data)}")
    params = ParamSet()
    optim: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        if e["group"] == "param":
            params[e["name"]] = Tensor(arr)
        else:
            optim[e["name"]] = arr
    bs = dict(header["bench_spec"])
    bs["contrast_range"] = tuple(bs["contrast_range"])
    bs["noise_range"] = tuple(bs["noise_range"])
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        bench_spec=BenchmarkSpec(**bs),
        params=params,
        optimizer=optim,
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        version=version,
    )


# -- the training loop ---------------------------------------------------------------


class Trainer:
    """Holds the state of one meta-training run.

    All randomness comes from counter streams keyed by (seed, iteration), so
    the state needed to resume is just parameters, optimizer moments and the
    iteration counter.
    """

    def __init__(self, config: TrainConfig, bench: Benchmark):
        config.validate()
        self.config = config
        self.bench = bench
        self.mcfg = config.model_config(bench.spec.dim)
        self.acfg = config.augment_config()
        self.layout = config.layout()
        self.params = init_params(self.mcfg, stream(config.seed, "init"))
        self.opt = make_optimizer(config)
        self.iteration = 0
        self.pretrain_history: list[float] = []
        if config.pretrain_epochs > 0:
            self.pretrain_history = pretrain(
                self.params,
                self.mcfg,
                bench,
                config.pretrain_epochs,
                stream(config.seed, "pretrain"),
                per_class=config.pretrain_per_class,
            )

    # hooks so tests can observe the parameters each stage sees
    def _on_stage(self, stage: str, params: ParamSet) -> None:
        pass

    def sample_tasks(self, rng: np.random.Generator) -> list[EpisodeTask]:
        c = self.config
        src = self.bench.source
        return [
            sample_task(src[(self.iteration * c.n_tasks_per_iter + j) % len(src)], c.n_way, c.k_shot, c.k_query, rng)
            for j in range(c.n_tasks_per_iter)
        ]

    def step(self) -> tuple[float, float]:
        it = self.iteration
        rng = stream(self.config.seed, "train", it)
        tasks = self.sample_tasks(rng)
        try:
            self._on_stage("stage1", self.params)
            l_sd = stage1_update(tasks, self.params, self.opt, self.mcfg, self.layout)
        except NumericError as exc:
            raise TrainingAborted(it, "stage1", str(exc)) from exc
        try:
            self._on_stage("stage2", self.params)
            l_ad = stage2_update(tasks, self.params, self.opt, self.mcfg, self.acfg, self.layout, rng)
        except NumericError as exc:
            raise TrainingAborted(it, "stage2", str(exc)) from exc
        self.iteration += 1
        return l_sd, l_ad

    def evaluate_targets(self) -> tuple[list[DomainEval], float]:
        c = self.config
        evals, styles = [], []
        for d in self.bench.target:
            acc, ci = evaluate(self.params, self.mcfg, d, c.eval_episodes, c.n_way, c.k_shot, c.seed, c.k_query)
            evals.append(DomainEval(d.domain_id, acc, ci))
            styles.append(
                np.mean(
                    [
                        style_invariance_score(
                            self.params, self.mcfg, d, s, max(1, c.style_tasks // len(self.bench.source)),
                            seed=c.seed, n_way=c.n_way, k_shot=c.k_shot, k_query=c.k_query,
                        )
                        for s in self.bench.source
                    ]
                )
            )
        return evals, float(np.mean(styles))

    def run(self, until: int | None = None, metrics: list[MetricsRecord] | None = None) -> list[MetricsRecord]:
        c = self.config
        until = c.iterations if until is None else until
        metrics = [] if metrics is None else metrics
        while self.iteration < until:
            t0 = time.perf_counter()
            l_sd, l_ad = self.step()
            due = (c.eval_interval > 0 and self.iteration % c.eval_interval == 0) or self.iteration == c.iterations
            if due:
                evals, style = self.evaluate_targets()
                wall = (time.perf_counter() - t0) * 1000 if c.record_timing else None
                metrics.append(MetricsRecord(self.iteration, l_sd, l_ad, evals, style, wall))
        return metrics

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            bench_spec=self.bench.spec,
            params=self.params.copy(),
            optimizer={k: v.copy() for k, v in self.opt.state_arrays().items()},
            iteration=self.iteration,
            rng_state={"scheme": "seedsequence-counter", "seed": self.config.seed, "next_iteration": self.iteration},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, bench: Benchmark) -> "Trainer":
        self = cls.__new__(cls)
        self.config = ckpt.config
        self.bench = bench
        self.mcfg = ckpt.config.model_config(bench.spec.dim)
        self.acfg = ckpt.config.augment_config()
        self.layout = ckpt.config.layout()
        self.params = ckpt.params.copy()
        self.opt = make_optimizer(ckpt.config)
        self.opt.load_state_arrays(ckpt.optimizer)
        self.iteration = ckpt.iteration
        self.pretrain_history = []
        return self


def train(config: TrainConfig, bench: Benchmark) -> tuple[ParamSet, list[MetricsRecord]]:
    trainer = Trainer(config, bench)
    metrics = trainer.run()
    return trainer.params, metrics


def metrics_header(config: TrainConfig, extra: dict | None = None) -> str:
    d = {"schema": METRICS_SCHEMA, "kind": "header", "engine": __version__, "config": config.to_dict()}
    if extra:
        d.update(extra)
    return json.dumps(d, sort_keys=True)


def write_metrics(path: str | Path, config: TrainConfig, records: Iterable[MetricsRecord], extra: dict | None = None) -> None:
    lines = [metrics_header(config, extra)] + [r.to_json() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")
