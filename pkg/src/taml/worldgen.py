"""Synthetic multi-domain few-shot benchmark.

Every domain shares the same kind of raw content (Gaussian class clusters)
and differs only in a parametric style transform applied on top of it:
channel gain, channel bias, a signed power "contrast" curve and additive
noise.  Target domains get novel classes and styles kept away from all
source styles.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Tensor

SCHEMA = "benchmark_v1"


class GenerationError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPrototype:
    class_id: int
    center: tuple[float, ...]
    within_scatter: float


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    gain: tuple[float, ...]
    bias: tuple[float, ...]
    contrast_exponent: float
    noise_scale: float
    class_ids: tuple[int, ...]

    def param_vector(self) -> np.ndarray:
        return np.concatenate(
            [np.log(self.gain), self.bias, [self.contrast_exponent, self.noise_scale]]
        )

    def transform(self, raw: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Apply the style to raw content; ``noise`` is a standard-normal draw of the same shape."""
        gain = np.asarray(self.gain)
        styled = gain * np.sign(raw) * np.abs(raw) ** self.contrast_exponent
        return styled + np.asarray(self.bias) + self.noise_scale * noise


@dataclass
class Domain:
    spec: DomainSpec
    prototypes: dict[int, ClassPrototype]

    @property
    def domain_id(self) -> int:
        return self.spec.domain_id

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.spec.class_ids

    def draw(self, class_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
        proto = self.prototypes[class_id]
        d = len(proto.center)
        raw = np.asarray(proto.center) + proto.within_scatter * rng.standard_normal((count, d))
        return self.spec.transform(raw, rng.standard_normal((count, d)))


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    n_source_domains: int = 4
    n_target_domains: int = 1
    classes_per_domain: int = 16
    dim: int = 16
    center_scale: float = 1.0
    within_scatter: float = 0.7
    gain_log_sd: float = 0.5
    bias_sd: float = 0.8
    contrast_range: tuple[float, float] = (0.6, 1.6)
    noise_range: tuple[float, float] = (0.05, 0.2)

    def validate(self) -> None:
        if self.n_source_domains < 2:
            raise ValueError("need at least 2 source domains")
        if self.n_target_domains < 1:
            raise ValueError("need at least 1 target domain")
        if self.classes_per_domain < 2 or self.dim < 1:
            raise ValueError("classes_per_domain must be >= 2 and dim >= 1")
        lo, hi = self.contrast_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise ValueError("contrast_range must lie within [0.5, 2.0]")
        if self.within_scatter <= 0 or self.center_scale <= 0:
            raise ValueError("within_scatter and center_scale must be positive")


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    source: list[Domain]
    target: list[Domain]

    def domains(self) -> list[Domain]:
        return self.source + self.target

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains():
            if d.domain_id == domain_id:
                return d
        raise KeyError(f"no domain with id {domain_id}")

    def to_json(self) -> str:
        def dom(d: Domain) -> dict:
            return {
                "spec": asdict(d.spec),
                "prototypes": [asdict(d.prototypes[c]) for c in d.class_ids],
            }

        doc = {
            "schema": SCHEMA,
            "spec": asdict(self.spec),
            "source": [dom(d) for d in self.source],
            "target": [dom(d) for d in self.target],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Benchmark":
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"unsupported benchmark schema {doc.get('schema')!r}")
        raw = dict(doc["spec"])
        raw["contrast_range"] = tuple(raw["contrast_range"])
        raw["noise_range"] = tuple(raw["noise_range"])
        spec = BenchmarkSpec(**raw)

        def dom(d: dict) -> Domain:
            s = d["spec"]
            ds = DomainSpec(
                domain_id=s["domain_id"],
                gain=tuple(s["gain"]),
                bias=tuple(s["bias"]),
                contrast_exponent=s["contrast_exponent"],
                noise_scale=s["noise_scale"],
                class_ids=tuple(s["class_ids"]),
            )
            protos = {
                p["class_id"]: ClassPrototype(p["class_id"], tuple(p["center"]), p["within_scatter"])
                for p in d["prototypes"]
            }
            return Domain(ds, protos)

        bench = cls(spec, [dom(d) for d in doc["source"]], [dom(d) for d in doc["target"]])
        validate_benchmark(bench)
        return bench


def _make_centers(spec: BenchmarkSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    min_sep = 3.0 * spec.within_scatter
    centers = np.empty((n, spec.dim))
    for k in range(n):
        for _ in range(1000):
            c = spec.center_scale * rng.standard_normal(spec.dim)
            if k == 0 or np.min(np.linalg.norm(centers[:k] - c, axis=1)) >= min_sep:
                centers[k] = c
                break
        else:
            raise GenerationError(
                f"could not separate class {k} by {min_sep:.3g} after 1000 draws; "
                "increase the feature dimension (dim) or reduce within_scatter"
            )
    return centers


def _draw_style(spec: BenchmarkSpec, domain_id: int, classes, rng) -> DomainSpec:
    lo, hi = spec.contrast_range
    nlo, nhi = spec.noise_range
    return DomainSpec(
        domain_id=domain_id,
        gain=tuple(np.exp(spec.gain_log_sd * rng.standard_normal(spec.dim)).tolist()),
        bias=tuple((spec.bias_sd * rng.standard_normal(spec.dim)).tolist()),
        contrast_exponent=float(rng.uniform(lo, hi)),
        noise_scale=float(rng.uniform(nlo, nhi)),
        class_ids=tuple(int(c) for c in classes),
    )


def make_benchmark(spec: BenchmarkSpec | None = None) -> Benchmark:
    """Deterministically build source and target domains from ``spec.seed``."""
    spec = spec or BenchmarkSpec()
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBE7C]))
    n_dom = spec.n_source_domains + spec.n_target_domains
    cpd = spec.classes_per_domain
    centers = _make_centers(spec, n_dom * cpd, rng)

    def protos(ids) -> dict[int, ClassPrototype]:
        return {
            int(c): ClassPrototype(int(c), tuple(centers[c].tolist()), spec.within_scatter)
            for c in ids
        }

    source = []
    for i in range(spec.n_source_domains):
        ids = range(i * cpd, (i + 1) * cpd)
        source.append(Domain(_draw_style(spec, i, ids, rng), protos(ids)))

    src_params = np.stack([d.spec.param_vector() for d in source])
    pair = [
        np.linalg.norm(src_params[a] - src_params[b])
        for a in range(len(source))
        for b in range(a + 1, len(source))
    ]
    # targets must sit at least as far from every source as sources sit from each other
    margin = float(np.mean(pair))
    target: list[Domain] = []
    for t in range(spec.n_target_domains):
        did = spec.n_source_domains + t
        ids = range(did * cpd, (did + 1) * cpd)
        for _ in range(1000):
            style = _draw_style(spec, did, ids, rng)
            if np.min(np.linalg.norm(src_params - style.param_vector(), axis=1)) >= margin:
                break
        else:
            raise GenerationError(
                "could not place a target style away from all source styles after "
                "1000 draws; increase the feature dimension (dim)"
            )
        target.append(Domain(style, protos(ids)))
    bench = Benchmark(spec, source, target)
    validate_benchmark(bench)
    return bench


def validate_benchmark(bench: Benchmark) -> None:
    spec = bench.spec
    if len(bench.source) < 2:
        raise ValueError("need at least 2 source domains")
    seen: set[int] = set()
    for d in bench.domains():
        if any(g <= 0 for g in d.spec.gain):
            raise ValueError(f"domain {d.domain_id}: gain must be positive")
        if not 0.5 <= d.spec.contrast_exponent <= 2.0:
            raise ValueError(f"domain {d.domain_id}: contrast exponent outside [0.5, 2]")
        if len(d.spec.gain) != spec.dim or len(d.spec.bias) != spec.dim:
            raise ValueError(f"domain {d.domain_id}: style dimension mismatch")
        if set(d.prototypes) != set(d.class_ids):
            raise ValueError(f"domain {d.domain_id}: prototypes do not match class ids")
    src_classes = {c for d in bench.source for c in d.class_ids}
    for d in bench.target:
        if src_classes & set(d.class_ids):
            raise ValueError(f"target domain {d.domain_id} reuses source classes")
    for d in bench.domains():
        if d.domain_id in seen:
            raise ValueError(f"duplicate domain id {d.domain_id}")
        seen.add(d.domain_id)


@dataclass
class EpisodeTask:
    """One N-way episode; rows are class-major, shot-minor in both sets."""

    support_x: Tensor
    support_y: list[int]
    query_x: Tensor
    query_y: list[int]
    n_way: int
    k_shot: int
    k_query: int
    domain_id: int
    class_ids: tuple[int, ...] = field(default=())

    def features(self) -> np.ndarray:
        """Support rows followed by query rows, the task's full feature matrix."""
        return np.concatenate([self.support_x.data, self.query_x.data], axis=0)

    def labels(self) -> list[int]:
        return self.support_y + self.query_y

    def validate(self) -> None:
        n, ks, kq = self.n_way, self.k_shot, self.k_query
        if self.support_x.shape[0] != n * ks or self.query_x.shape[0] != n * kq:
            raise AssertionError("support/query row counts do not match N*K")
        if self.support_y != canonical_labels(n, ks) or self.query_y != canonical_labels(n, kq):
            raise AssertionError("labels are not class-major episode-local")
        if self.class_ids and len(set(self.class_ids)) != n:
            raise AssertionError("episode classes are not distinct")


def canonical_labels(n_way: int, per_class: int) -> list[int]:
    return [c for c in range(n_way) for _ in range(per_class)]


def sample_task(
    domain: Domain, n_way: int, k_shot: int, k_query: int, rng: np.random.Generator
) -> EpisodeTask:
    if n_way > len(domain.class_ids):
        raise SamplingError(
            f"{n_way}-way episode needs {n_way} classes, domain {domain.domain_id} has "
            f"{len(domain.class_ids)}"
        )
    chosen = rng.choice(len(domain.class_ids), size=n_way, replace=False)
    classes = tuple(domain.class_ids[i] for i in chosen)
    per = k_shot + k_query
    blocks = [domain.draw(c, per, rng) for c in classes]
    support = np.concatenate([b[:k_shot] for b in blocks], axis=0)
    query = np.concatenate([b[k_shot:] for b in blocks], axis=0)
    return EpisodeTask(
        support_x=Tensor(support),
        support_y=canonical_labels(n_way, k_shot),
        query_x=Tensor(query),
        query_y=canonical_labels(n_way, k_query),
        n_way=n_way,
        k_shot=k_shot,
        k_query=k_query,
        domain_id=domain.domain_id,
        class_ids=classes,
    )


def domain_shift_measure(
    domain_a: Domain | DomainSpec,
    domain_b: Domain | DomainSpec,
    n_probe: int = 1000,
    seed: int = 0,
) -> float:
    """Distance between the (mean, var) style signatures of two domains.

    Both domains restyle the same standard-normal raw content (and the same
    noise draw), so only the styles differ.
    """
    sa = domain_a.spec if isinstance(domain_a, Domain) else domain_a
    sb = domain_b.spec if isinstance(domain_b, Domain) else domain_b
    rng = np.random.default_rng(seed)
    d = len(sa.gain)
    raw = rng.standard_normal((n_probe, d))
    noise = rng.standard_normal((n_probe, d))
    xa, xb = sa.transform(raw, noise), sb.transform(raw, noise)
    sig_a = np.concatenate([xa.mean(0), xa.var(0)])
    sig_b = np.concatenate([xb.mean(0), xb.var(0)])
    return float(np.linalg.norm(sig_a - sig_b))


def pooled_source_data(
    bench: Benchmark, per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """All source classes pooled with global labels 0..C-1 (for pretraining)."""
    xs, ys = [], []
    label = 0
    for d in bench.source:
        for c in d.class_ids:
            xs.append(d.draw(c, per_class, rng))
            ys.append(np.full(per_class, label))
            label += 1
    return np.concatenate(xs), np.concatenate(ys), label
