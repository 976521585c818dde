"""Layered relu encoder with a split forward pass, plus metric heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import TaskLayout, init_fm_params
from .diffcore import (
    ParamSet,
    Tensor,
    add,
    affine,
    concat,
    cross_entropy,
    div,
    matmul,
    mul,
    neg,
    relu,
    rows,
    sqrt,
    sub,
    texp,
    transpose,
    tsum,
)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    widths: tuple[int, ...] = (64, 64, 64, 64)
    eligible_layers: tuple[int, ...] = (1, 2)

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if not self.widths:
            raise ValueError("encoder needs at least one layer")
        if not self.eligible_layers:
            raise ValueError("eligible_layers must not be empty")
        for l in self.eligible_layers:
            if not 1 <= l <= self.depth - 1:
                raise ValueError(
                    f"eligible layer {l} outside [1, {self.depth - 1}]; the last layer "
                    "needs trainable layers above it"
                )


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "matching_cosine"
    tau_init: float = 10.0

    def validate(self) -> None:
        if self.kind not in ("matching_cosine", "prototypical"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if not self.tau_init > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    fm_init: float = 0.0

    def validate(self) -> None:
        self.encoder.validate()
        self.head.validate()


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """He-initialized encoder, log-temperature head, and FM parameters per eligible layer."""
    cfg.validate()
    ps = ParamSet()
    fan_in = cfg.encoder.input_dim
    for l, width in enumerate(cfg.encoder.widths, start=1):
        ps[f"encoder.l{l}.weight"] = Tensor(rng.standard_normal((fan_in, width)) * math.sqrt(2.0 / fan_in))
        ps[f"encoder.l{l}.bias"] = Tensor(np.zeros(width))
        fan_in = width
    ps["head.log_tau"] = Tensor(np.array([math.log(cfg.head.tau_init)]))
    widths = {l: cfg.encoder.widths[l - 1] for l in cfg.encoder.eligible_layers}
    init_fm_params(ps, widths, cfg.fm_init)
    return ps


def _check_layer(l: int, depth: int) -> None:
    if not 1 <= l <= depth:
        raise ValueError(f"layer {l} out of range [1, {depth}]")


def _layer(h: Tensor, params: ParamSet, l: int) -> Tensor:
    return relu(affine(h, params[f"encoder.l{l}.weight"], params[f"encoder.l{l}.bias"]))


def encode_to_layer(x: Tensor, l: int, params: ParamSet, cfg: ModelConfig) -> Tensor:
    _check_layer(l, cfg.encoder.depth)
    h = x
    for k in range(1, l + 1):
        h = _layer(h, params, k)
    return h


def encode_from_layer(h: Tensor, l: int, params: ParamSet, cfg: ModelConfig) -> Tensor:
    """Continue the forward pass from layer-``l`` features to the output layer."""
    _check_layer(l, cfg.encoder.depth)
    for k in range(l + 1, cfg.encoder.depth + 1):
        h = _layer(h, params, k)
    return h


def encode(x: Tensor, params: ParamSet, cfg: ModelConfig) -> Tensor:
    return encode_to_layer(x, cfg.encoder.depth, params, cfg)


def _class_average(support_y: Sequence[int], n_way: int) -> np.ndarray:
    y = np.asarray(support_y)
    a = np.zeros((len(y), n_way))
    a[np.arange(len(y)), y] = 1.0
    counts = a.sum(axis=0)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {missing} have no support shots")
    return a / counts


def _row_sq_norm(x: Tensor) -> Tensor:
    return tsum(mul(x, x), axis=1, keepdims=True)


def head_logits(
    support_f: Tensor,
    support_y: Sequence[int],
    query_f: Tensor,
    n_way: int,
    params: ParamSet,
    head: HeadConfig,
) -> Tensor:
    """[N*Kq, N] logits from support/query embeddings."""
    avg = _class_average(support_y, n_way)
    tau = texp(params["head.log_tau"])
    if head.kind == "matching_cosine":
        s = div(support_f, sqrt(add(_row_sq_norm(support_f), 1e-12)))
        q = div(query_f, sqrt(add(_row_sq_norm(query_f), 1e-12)))
        cos = matmul(q, transpose(s))
        return mul(matmul(cos, Tensor(avg)), tau)
    if head.kind == "prototypical":
        centroids = matmul(Tensor(avg.T), support_f)
        cross = matmul(query_f, transpose(centroids))
        d2 = add(sub(_row_sq_norm(query_f), mul(cross, 2.0)), transpose(_row_sq_norm(centroids)))
        return neg(mul(d2, tau))
    raise ValueError(f"unknown head kind {head.kind!r}")


def task_loss_from_embeddings(
    emb: Tensor, layout: TaskLayout, labels: Sequence[int], params: ParamSet, cfg: ModelConfig
) -> Tensor:
    ns = layout.n_way * layout.k_shot
    support, query = rows(emb, 0, ns), rows(emb, ns, emb.shape[0])
    logits = head_logits(support, labels[:ns], query, layout.n_way, params, cfg.head)
    return cross_entropy(logits, labels[ns:])


def batched_task_losses(
    inputs: Sequence[Tensor],
    layout: TaskLayout,
    labels: Sequence[Sequence[int]],
    params: ParamSet,
    cfg: ModelConfig,
    start_layer: int = 0,
) -> list[Tensor]:
    """Per-task query losses, sharing one encoder pass over all tasks' rows.

    ``inputs`` are raw inputs (``start_layer=0``) or layer-``start_layer``
    features; each holds support rows then query rows.
    """
    stacked = concat(list(inputs), axis=0) if len(inputs) > 1 else inputs[0]
    if start_layer == 0:
        emb = encode(stacked, params, cfg)
    else:
        emb = encode_from_layer(stacked, start_layer, params, cfg)
    r = layout.rows
    out = []
    for i, lab in enumerate(labels):
        part = rows(emb, i * r, (i + 1) * r) if len(inputs) > 1 else emb
        out.append(task_loss_from_embeddings(part, layout, lab, params, cfg))
    return out


def episode_loss(task, params: ParamSet, cfg: ModelConfig, inject: tuple[int, Tensor] | None = None) -> Tensor:
    """Query cross-entropy for one episode.

    With ``inject=(l, features)`` the forward pass starts from the given
    layer-``l`` features (support rows then query rows) instead of the raw
    task inputs.
    """
    layout = TaskLayout(task.n_way, task.k_shot, task.k_query)
    labels = task.support_y + task.query_y
    if inject is None:
        x = concat([task.support_x, task.query_x], axis=0)
        emb = encode(x, params, cfg)
    else:
        l, feats = inject
        emb = encode_from_layer(feats, l, params, cfg)
    return task_loss_from_embeddings(emb, layout, labels, params, cfg)


def predict(task, params: ParamSet, cfg: ModelConfig) -> np.ndarray:
    """Argmax class for every query row (no tape involved)."""
    s = encode(task.support_x, params, cfg)
    q = encode(task.query_x, params, cfg)
    logits = head_logits(s, task.support_y, q, task.n_way, params, cfg.head)
    return np.argmax(logits.data, axis=1)
