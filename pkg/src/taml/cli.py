"""Command-line entry point: ``taml gen|train|eval|theory``.

Exit codes: 0 success, 2 config or input error, 3 numeric abort during
training, 4 a theory check out of tolerance.  Every artifact written carries
the resolved configuration and the engine version.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import theorylab as tl
from .augment import AugmentConfig, InterpolationConfig
from .metatrain import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingAborted,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    write_metrics,
)
from .worldgen import Benchmark, BenchmarkSpec, make_benchmark

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_THEORY = 0, 2, 3, 4
MIN_THEORY_SAMPLES = 10_000
SWEEP_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0)


class InputError(Exception):
    pass


def _write_json(path: str | Path, doc: dict) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _load_bench(path: str | None, spec: BenchmarkSpec | None = None) -> Benchmark:
    if path is None:
        return make_benchmark(spec or BenchmarkSpec())
    try:
        return Benchmark.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load benchmark {path}: {exc}") from exc


# -- gen ---------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    spec = BenchmarkSpec(
        seed=args.seed,
        n_source_domains=args.domains,
        n_target_domains=args.targets,
        classes_per_domain=args.classes,
        dim=args.dim,
    )
    try:
        spec.validate()
        bench = make_benchmark(spec)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        Path(args.out).write_text(bench.to_json())
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {args.out}: {len(bench.source)} source, {len(bench.target)} target domains")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

# flag name -> TrainConfig field, for plain value overrides
_TRAIN_OVERRIDES = {
    "iterations": "iterations",
    "seed": "seed",
    "lr": "lr",
    "way": "n_way",
    "shot": "k_shot",
    "query": "k_query",
    "tasks": "n_tasks_per_iter",
    "m": "m",
    "head": "head",
    "fm_init": "fm_init",
    "eval_episodes": "eval_episodes",
    "eval_interval": "eval_interval",
    "style_tasks": "style_tasks",
    "pretrain_epochs": "pretrain_epochs",
    "optimizer": "optimizer",
}


def resolve_train_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Config file first, then flags on top.  Returns (train config, bench section)."""
    doc = _read_json(args.config) if args.config else {}
    unknown = set(doc) - {"train", "bench"}
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    train = dict(doc.get("train", {}))
    for flag, key in _TRAIN_OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            train[key] = v
    if args.gamma is not None:
        train["gamma"] = list(args.gamma)
    if args.no_fm:
        train["use_fm"] = False
    if args.no_mtst:
        train["use_mtst"] = False
    if args.no_mti:
        train["use_mti"] = False
    if args.stopgrad_stats:
        train["stopgrad_stats"] = True
    if args.identity_style:
        train["force_identity_style"] = True
    if args.record_timing:
        train["record_timing"] = True
    try:
        cfg = TrainConfig.from_dict(train)
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid train config: {exc}") from exc
    return cfg, dict(doc.get("bench", {}))


def cmd_train(args: argparse.Namespace) -> int:
    cfg, bench_section = resolve_train_config(args)
    if args.bench is not None:
        bench = _load_bench(args.bench)
    else:
        known = {f.name for f in fields(BenchmarkSpec)}
        if set(bench_section) - known:
            raise InputError(f"unknown bench keys: {sorted(set(bench_section) - known)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in bench_section.items()}
        try:
            spec = BenchmarkSpec(**kw)
            spec.validate()
        except (ValueError, TypeError) as exc:
            raise InputError(f"invalid bench config: {exc}") from exc
        bench = make_benchmark(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc
    resolved = {"engine": __version__, "train": cfg.to_dict(), "bench": asdict(bench.spec)}
    _write_json(out / "config.json", resolved)

    trainer = Trainer(cfg, bench)
    try:
        records = trainer.run()
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics(out / "metrics.jsonl", cfg, records, {"bench": asdict(bench.spec)})
    save_checkpoint(out / "checkpoint.bin", trainer.checkpoint())
    for r in records:
        accs = ", ".join(f"domain {e.domain_id}: {e.accuracy:.4f} +- {e.ci_half_width:.4f}" for e in r.eval)
        print(f"iter {r.iteration}  L_SD {r.L_SD:.4f}  L_AD {r.L_AD:.4f}  {accs}  style {r.style_invariance:.4f}")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'metrics.jsonl'}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    bench = _load_bench(args.bench, ckpt.bench_spec)
    cfg = ckpt.config
    try:
        domain = bench.domain(args.domain) if args.domain is not None else bench.target[0]
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from exc
    way = args.way if args.way is not None else cfg.n_way
    shot = args.shot if args.shot is not None else cfg.k_shot
    seed = args.seed if args.seed is not None else cfg.seed
    if args.episodes < 1 or way < 2 or shot < 1:
        raise InputError("need episodes >= 1, way >= 2, shot >= 1")
    try:
        acc, ci = evaluate(ckpt.params, cfg.model_config(bench.spec.dim), domain, args.episodes, way, shot, seed, cfg.k_query)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    report = {
        "engine": __version__,
        "config": cfg.to_dict(),
        "checkpoint_iteration": ckpt.iteration,
        "eval": {"domain": domain.domain_id, "episodes": args.episodes, "way": way, "shot": shot, "seed": seed},
        "accuracy": acc,
        "ci_half_width": ci,
    }
    print(f"domain {domain.domain_id}: {100 * acc:.2f}% +- {100 * ci:.2f}% ({args.episodes} episodes, {way}-way {shot}-shot)")
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


# -- theory -----------------------------------------------------------------------


def _check(name: str, ok: bool, **values) -> dict:
    return {"name": name, "pass": bool(ok), **values}


def suite_variances(samples: int, seed: int) -> list[dict]:
    checks = []
    for a, b in [(1.0, 1.0), (0.2, 0.2), (0.5, 2.0)]:
        exact = tl.beta_pair_variance(a, b)
        est = tl.mc_beta_variance(a, b, samples, seed)
        checks.append(_check(f"beta_variance({a},{b})", est.agrees_with(exact), exact=exact, mc=est.value, se=est.se))
    for m in (2, 3, 4):
        g = [0.2] * m
        exact = tl.dirichlet_component_variance(g)
        est = tl.mc_dirichlet_variance(g, samples, seed)
        checks.append(_check(f"dirichlet_variance([0.2]*{m})", est.agrees_with(exact), exact=exact, mc=est.value, se=est.se))
    for a, b in [(1.0, 1.0), (0.2, 0.2), (0.5, 2.0)]:
        vb, vd = tl.beta_pair_variance(a, b), tl.dirichlet_component_variance([a, b])
        checks.append(_check(f"m2_reduction({a},{b})", abs(vb - vd) <= 1e-15 * vb, beta=vb, dirichlet=vd))
    for a in (0.2, 0.5, 1.0):
        ks = tl.mti_beta_ks(a, max(samples // 10, 100_000), seed)
        checks.append(_check(f"mti_beta_ks({a})", ks < 0.005, statistic=ks))
    cmp = tl.pair_vs_multi_comparison()
    checks.append(_check("pair_vs_multi_variance_reported", True, **cmp))
    return checks


def suite_sweep(samples: int, seed: int) -> list[dict]:
    res = tl.gamma_sweep(SWEEP_GRID, 4, samples, seed)
    checks = [
        _check("e_max_lambda_monotone", res.monotone("e_max_lambda"), values=res.e_max_lambda, se=res.e_max_se),
        _check("var_lambda_monotone", res.monotone("var_lambda"), values=res.var_lambda, se=res.var_se),
    ]
    for g, v, se in zip(res.gamma_grid, res.var_lambda, res.var_se):
        exact = tl.dirichlet_component_variance([g] * 4)
        checks.append(_check(f"var_closed_form(gamma={g})", abs(v - exact) <= 3 * se, exact=exact, mc=v, se=se))
    checks.append(_check("sweep_result", True, **asdict(res)))
    return checks


def suite_totalvar(samples: int, seed: int) -> list[dict]:
    feats = tl.default_theory_features()
    cfg = AugmentConfig(interp=InterpolationConfig((0.2, 0.2, 0.2)))
    small = tl.total_variance_check(feats, cfg, samples, seed=seed)
    large = tl.total_variance_check(feats, cfg, 4 * samples, seed=seed + 1)
    ratio = small.residual_frobenius / max(large.residual_frobenius, 1e-300)

    def summary(c: tl.CovCheck) -> dict:
        return {
            "residual_frobenius": c.residual_frobenius,
            "se_bound": c.se_bound,
            "min_eig_cov_of_mean": c.min_eig_cov_of_mean,
            "n_mc": c.n_mc,
            "total_cov": c.total_cov.tolist(),
            "expected_conditional_cov": c.expected_conditional_cov.tolist(),
            "cov_of_conditional_mean": c.cov_of_conditional_mean.tolist(),
        }

    return [
        _check("residual_within_noise", small.within_noise(), **summary(small)),
        _check("residual_within_noise_4x", large.within_noise(), **summary(large)),
        _check("residual_shrinks_4x", 1.5 <= ratio <= 2.7, ratio=ratio),
        _check("symmetric", small.symmetric() and large.symmetric()),
        _check("cov_of_mean_psd", large.min_eig_cov_of_mean >= -1e-8 - 5 * large.se_bound, min_eig=large.min_eig_cov_of_mean),
    ]


def suite_regtrace(samples: int, seed: int) -> list[dict]:
    z = np.random.default_rng(seed).standard_normal(10_000)
    x = 1.0 + (z - z.mean()) / z.std()  # mean 1, variance 1 exactly
    w1 = math.log(math.e - 1.0)  # softplus(w1) = 1
    r = tl.regularizer_trace(x, w1, samples, seed=seed)
    r_off = tl.regularizer_trace(x, -40.0, samples, seed=seed)
    w2 = math.log(math.exp(2.0) - 1.0)  # softplus(w2) = 2
    r2 = tl.regularizer_trace(x, w2, samples, seed=seed)
    return [
        _check("closed_form_matches_mc", r.empirical.agrees_with(r.closed_form), closed_form=r.closed_form,
               mc=r.empirical.value, se=r.empirical.se),
        _check("identity_limit", r_off.closed_form < 1e-30 and r_off.empirical.value < 1e-30,
               closed_form=r_off.closed_form, mc=r_off.empirical.value),
        _check("scale_doubling_quadruples", abs(r2.closed_form - 4 * r.closed_form) <= 1e-12 * r2.closed_form,
               closed_form=r2.closed_form),
    ]


SUITES = {"variances": suite_variances, "sweep": suite_sweep, "totalvar": suite_totalvar, "regtrace": suite_regtrace}


def cmd_theory(args: argparse.Namespace) -> int:
    if args.samples < MIN_THEORY_SAMPLES:
        raise InputError(f"--samples must be >= {MIN_THEORY_SAMPLES}, got {args.samples}")
    checks = SUITES[args.suite](args.samples, args.seed)
    failed = [c["name"] for c in checks if not c["pass"]]
    report = {
        "engine": __version__,
        "config": {"suite": args.suite, "samples": args.samples, "seed": args.seed},
        "checks": checks,
        "pass": not failed,
    }
    for c in checks:
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}")
    if args.out:
        _write_json(args.out, report)
    if failed:
        print(f"theory checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_THEORY
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taml", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"taml {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multi-domain benchmark")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", type=int, default=4, help="number of source domains")
    g.add_argument("--targets", type=int, default=1, help="number of held-out target domains")
    g.add_argument("--classes", type=int, default=16, help="classes per domain")
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="meta-train and write checkpoint + metrics")
    t.add_argument("--config", help="JSON with optional 'train' and 'bench' sections")
    t.add_argument("--bench", help="benchmark JSON (default: build from config)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--way", type=int)
    t.add_argument("--shot", type=int)
    t.add_argument("--query", type=int)
    t.add_argument("--tasks", type=int, help="tasks per iteration")
    t.add_argument("--m", type=int, help="tasks mixed per interpolation")
    t.add_argument("--gamma", type=float, nargs="+")
    t.add_argument("--head", choices=["matching_cosine", "prototypical"])
    t.add_argument("--fm-init", type=float)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--style-tasks", type=int)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--no-fm", action="store_true", help="disable feature modulation")
    t.add_argument("--no-mtst", action="store_true", help="disable style transfer")
    t.add_argument("--no-mti", action="store_true", help="disable multi-task interpolation")
    t.add_argument("--stopgrad-stats", action="store_true")
    t.add_argument("--identity-style", action="store_true", help="transfer every task to its own style")
    t.add_argument("--record-timing", action="store_true", help="store wall-clock times in metrics")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bench", help="benchmark JSON (default: rebuild from the checkpoint)")
    e.add_argument("--domain", type=int, help="domain id (default: first target)")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--way", type=int)
    e.add_argument("--shot", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="run a Monte-Carlo verification suite")
    th.add_argument("--suite", choices=sorted(SUITES), required=True)
    th.add_argument("--samples", type=int, default=1_000_000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
