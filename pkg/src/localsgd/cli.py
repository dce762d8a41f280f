"""Experiment runner: config parsing, orchestration, CSV emission, and the
one-command acceptance suite.

Subcommands: `variances`, `run`, `verify`, `plan`, `solve-ref`. Flags
override the config file. Exit codes: 0 success, 1 criterion/verdict
failure, 2 usage or config error, 3 data error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import dataio, theory, verify
from .dataio import Regime
from .objective import (
    Problem,
    ReferenceSolution,
    build_problem,
    measure_variances,
    solve_reference,
)
from .simulator import (
    DivergenceError,
    GradientMode,
    RunConfig,
    SyncSchedule,
    run_local_sgd,
    run_replicated,
)

EXIT_OK = 0
EXIT_CRITERION = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Resolved experiment description (config file plus flag overrides)."""

    # data
    source: str = "synthetic"
    manifest: str = ""
    data_dir: str = ""
    n: int = 1000
    d: int = 20
    data_seed: int = 7
    sort_by_label: bool = False
    label_noise: float = 0.0
    # problem
    lam_spec: str = "1/n"
    M: int = 4
    regime: str = "identical"
    # solver
    tol: float = 1e-10
    accelerated: bool = True
    # run
    gradient_mode: str = "stochastic"
    batch: int = 1
    noise_sigma: float | None = None
    gamma_spec: str = "1/L"
    schedule_spec: str = "uniform"
    H_list: list[int] = field(default_factory=lambda: [1, 4, 16])
    T: int = 2000
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    record_every: int | None = None
    # variance sweep
    var_M_list: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 20])
    var_batch_list: list[str] = field(default_factory=lambda: ["1", "4", "16", "full"])
    # output
    out_dir: str = "out"


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_seeds(spec: str) -> list[int]:
    spec = spec.strip()
    if ":" in spec:
        a, b = spec.split(":")
        return list(range(int(a), int(b)))
    return [int(tok) for tok in spec.split(",") if tok.strip()]


def _parse_int_list(spec: str) -> list[int]:
    return [int(tok) for tok in spec.split(",") if tok.strip()]


def load_config(path: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback)

    if parser.has_section("data"):
        cfg.source = get("data", "source", cfg.source)
        cfg.manifest = get("data", "manifest", cfg.manifest)
        cfg.data_dir = get("data", "dir", cfg.data_dir)
        cfg.n = int(get("data", "n", cfg.n))
        cfg.d = int(get("data", "d", cfg.d))
        cfg.data_seed = int(get("data", "seed", cfg.data_seed))
        cfg.sort_by_label = _parse_bool(get("data", "sort_by_label", "false"))
        cfg.label_noise = float(get("data", "label_noise", cfg.label_noise))
    if parser.has_section("problem"):
        cfg.lam_spec = get("problem", "lambda", cfg.lam_spec)
        cfg.M = int(get("problem", "M", cfg.M))
        cfg.regime = get("problem", "regime", cfg.regime)
    if parser.has_section("solver"):
        cfg.tol = float(get("solver", "tol", cfg.tol))
        cfg.accelerated = _parse_bool(get("solver", "accelerated", "true"))
    if parser.has_section("run"):
        cfg.gradient_mode = get("run", "gradient_mode", cfg.gradient_mode)
        cfg.batch = int(get("run", "batch", cfg.batch))
        ns = get("run", "noise_sigma", "")
        cfg.noise_sigma = float(ns) if ns else None
        cfg.gamma_spec = get("run", "gamma", cfg.gamma_spec)
        cfg.schedule_spec = get("run", "schedule", cfg.schedule_spec)
        cfg.H_list = _parse_int_list(get("run", "H", "1,4,16"))
        cfg.T = int(get("run", "T", cfg.T))
        cfg.seeds = _parse_seeds(get("run", "seeds", "0:10"))
        rec = get("run", "record_every", "")
        cfg.record_every = int(rec) if rec else None
    if parser.has_section("variances"):
        cfg.var_M_list = _parse_int_list(get("variances", "M", "1,2,4,8,20"))
        cfg.var_batch_list = [tok.strip() for tok in
                              get("variances", "batch", "1,4,16,full").split(",")]
    if parser.has_section("output"):
        cfg.out_dir = get("output", "dir", cfg.out_dir)
    return cfg


def _data_dir(cfg: ExperimentConfig) -> str:
    return (cfg.data_dir or os.environ.get(dataio.DATA_DIR_ENV, "") or "data")


def resolve_dataset(cfg: ExperimentConfig) -> dataio.Dataset:
    if cfg.source == "synthetic":
        return dataio.generate_synthetic(
            cfg.n, cfg.d, seed=cfg.data_seed, sort_by_label=cfg.sort_by_label,
            label_noise=cfg.label_noise)
    data_dir = _data_dir(cfg)
    manifest_path = cfg.manifest or os.path.join(data_dir, "manifest.txt")
    with open(manifest_path) as f:
        entries = dataio.parse_manifest(f)
    if cfg.source not in entries:
        raise dataio.ManifestError(
            f"dataset {cfg.source!r} not in manifest {manifest_path}")
    return dataio.load_dataset(entries[cfg.source], data_dir)


def resolve_regime(name: str) -> Regime:
    try:
        return Regime(name.lower())
    except ValueError:
        raise ConfigError(f"unknown regime {name!r}") from None


def resolve_problem(cfg: ExperimentConfig) -> Problem:
    ds = resolve_dataset(cfg)
    part = dataio.partition(ds, cfg.M, resolve_regime(cfg.regime))
    lam = None if cfg.lam_spec.strip() == "1/n" else float(cfg.lam_spec)
    return build_problem(ds, part, lam=lam)


def resolve_gamma(spec: str, p: Problem, M: int, T: int, H: int) -> float:
    """Stepsize spec: absolute float, 'c/L' multiples of the estimated L, or
    a planner rule name (which uses the almost-sure component L for the
    finite-sum rules)."""
    spec = spec.strip()
    if spec.endswith("/L"):
        return float(spec[:-2]) / p.L
    if spec in ("sc-identical-ubv", "sc-identical-fs"):
        return theory.plan_gamma(
            spec, L=p.L if spec == "sc-identical-ubv" else p.L_component, mu=p.mu, M=M,
            H=H, t_param=float(H)).gamma
    if spec == "wc-identical-ubv":
        return theory.plan_gamma("wc-identical-ubv", L=p.L, M=M, T=T).gamma
    if spec in ("wc-identical-fs", "wc-heterogeneous"):
        return theory.plan_gamma(spec, L=p.L_component, M=M, T=T, H=H).gamma
    return float(spec)


def resolve_schedule(spec: str, H: int, T: int) -> SyncSchedule:
    spec = spec.strip()
    if spec == "uniform":
        return SyncSchedule.uniform(H, T)
    if spec == "one-shot":
        return SyncSchedule.one_shot(T)
    if spec.startswith("explicit:"):
        steps = _parse_int_list(spec.split(":", 1)[1])
        return SyncSchedule.from_steps(steps)
    raise ConfigError(f"unknown schedule spec {spec!r}")


# ---------------------------------------------------------------------------
# Bound selection for cmd_run
# ---------------------------------------------------------------------------

def applicable_bounds(p: Problem, run_cfg: RunConfig, r0_sq: float,
                      var_report) -> list[theory.BoundCurve]:
    """Every theorem whose hypotheses the run satisfies, with the RHS built
    from measured quantities. Curves that fail a stepsize precondition are
    skipped (the checker refuses rather than reporting a verdict)."""
    curves = []
    common = dict(gamma=run_cfg.gamma, T=run_cfg.T, H=run_cfg.schedule.H,
                  M=run_cfg.M, r0_sq=r0_sq)
    noise_sq = (run_cfg.noise_sigma or 0.0) ** 2
    candidates = []
    if run_cfg.regime == Regime.IDENTICAL:
        if run_cfg.gradient_mode == GradientMode.INJECTED_NOISE:
            bi = theory.BoundInputs(L=p.L, mu=p.mu, sigma_sq=noise_sq, **common)
            if p.mu > 0:
                candidates.append((theory.bound_sc_identical_ubv, bi))
            candidates.append((theory.bound_wc_identical_ubv, bi))
        if run_cfg.gradient_mode == GradientMode.STOCHASTIC:
            bi = theory.BoundInputs(L=p.L_component, mu=p.mu,
                                    sigma_opt_sq=var_report.sigma_opt_sq, **common)
            if p.mu > 0:
                candidates.append((theory.bound_sc_identical_fs, bi))
            candidates.append((theory.bound_wc_identical_fs, bi))
    else:
        bi = theory.BoundInputs(L=p.L_component, mu=p.mu,
                                sigma_dif_sq=var_report.sigma_dif_sq, **common)
        candidates.append((theory.bound_wc_heterogeneous, bi))
    for fn, bi in candidates:
        try:
            curves.append(fn(bi))
        except theory.PreconditionError:
            continue
    return curves


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_variances(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ds = resolve_dataset(cfg)
    out_path = os.path.join(cfg.out_dir, "variances.csv")
    rows = []
    for M in cfg.var_M_list:
        part = dataio.partition(ds, M, Regime.HETEROGENEOUS)
        lam = None if cfg.lam_spec.strip() == "1/n" else float(cfg.lam_spec)
        p = build_problem(ds, part, lam=lam)
        ref = solve_reference(p, cfg.tol, accelerated=cfg.accelerated)
        for batch_spec in cfg.var_batch_list:
            exhaustive = batch_spec == "full"
            batch = 1 if exhaustive else int(batch_spec)
            vr = measure_variances(p, ref, batch=batch, exhaustive=exhaustive)
            rows.append((ds.name, M, batch_spec, vr.sigma_opt_sq, vr.sigma_dif_sq))
    with open(out_path, "w") as f:
        f.write("dataset,M,batch,sigma_opt_sq,sigma_dif_sq\n")
        for name, M, batch_spec, so, sd in rows:
            f.write(f"{name},{M},{batch_spec},{so!r},{sd!r}\n")
    print(f"wrote {out_path} ({len(rows)} rows)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    p = resolve_problem(cfg)
    ref = solve_reference(p, cfg.tol, accelerated=cfg.accelerated)
    r0_sq = float(np.sum(ref.x_star**2))
    mode = GradientMode(cfg.gradient_mode)
    var_report = measure_variances(p, ref, batch=cfg.batch)
    with open(os.path.join(cfg.out_dir, "variances.txt"), "w") as f:
        f.write(var_report.to_kv_text())
    with open(os.path.join(cfg.out_dir, "variances_per_node.csv"), "w") as f:
        var_report.to_csv(f)

    summary = []
    any_failed = False
    for H in cfg.H_list:
        schedule = resolve_schedule(cfg.schedule_spec, H, cfg.T)
        gamma = resolve_gamma(cfg.gamma_spec, p, cfg.M, cfg.T, schedule.H)
        run_cfg = RunConfig(M=cfg.M, T=cfg.T, schedule=schedule, gamma=gamma,
                            regime=resolve_regime(cfg.regime), gradient_mode=mode,
                            seed=cfg.seeds[0], batch=cfg.batch,
                            noise_sigma=cfg.noise_sigma,
                            record_every=cfg.record_every)
        tag = f"H{schedule.H}"
        try:
            if len(cfg.seeds) >= 2:
                agg = run_replicated(p, run_cfg, ref, cfg.seeds)
                agg.metadata.update(_sigma_metadata(var_report))
                path = os.path.join(cfg.out_dir, f"run_{tag}.csv")
                with open(path, "w") as f:
                    agg.to_csv(f)
                final_sub = agg.mean["subopt"][-1]
                final_dist = agg.mean["dist_sq"][-1]
                comm = agg.comm_rounds
                verdicts = _emit_bounds(cfg, p, run_cfg, r0_sq, var_report, agg, tag)
            else:
                tr = run_local_sgd(p, run_cfg, ref)
                tr.metadata.update(_sigma_metadata(var_report))
                path = os.path.join(cfg.out_dir, f"run_{tag}.csv")
                with open(path, "w") as f:
                    tr.to_csv(f)
                final_sub = tr.subopt[-1]
                final_dist = tr.dist_sq[-1]
                comm = tr.comm_rounds
                verdicts = []
        except DivergenceError as e:
            print(f"H={schedule.H}: {e} (run skipped)")
            summary.append((schedule.H, None, None, None, "diverged"))
            continue
        holds = all(v.holds for _, v in verdicts) if verdicts else None
        if holds is False:
            any_failed = True
        summary.append((schedule.H, comm, float(final_sub), float(final_dist),
                        "" if holds is None else ("holds" if holds else "violated")))
        print(f"H={schedule.H}: comm_rounds={comm} final_subopt={final_sub:.4e} "
              f"final_dist_sq={final_dist:.4e} "
              + (f"bounds={'ok' if holds else 'VIOLATED'}" if holds is not None else ""))

    with open(os.path.join(cfg.out_dir, "summary.csv"), "w") as f:
        f.write("H,comm_rounds,final_subopt,final_dist_sq,bounds\n")
        for H, comm, fs, fd, b in summary:
            f.write(f"{H},{comm},{'' if fs is None else repr(fs)},"
                    f"{'' if fd is None else repr(fd)},{b}\n")
    return EXIT_CRITERION if any_failed else EXIT_OK


def _sigma_metadata(vr) -> dict:
    return {
        "sigma_sq_estimate": repr(float(vr.sigma_sq)),
        "sigma_sq_is_estimate": vr.sigma_sq_is_estimate,
        "sigma_opt_sq": repr(float(vr.sigma_opt_sq)),
        "sigma_dif_sq": repr(float(vr.sigma_dif_sq)),
        "sigma_batch": vr.batch_size,
    }


def _emit_bounds(cfg, p, run_cfg, r0_sq, var_report, agg, tag) -> list:
    verdicts = []
    for curve in applicable_bounds(p, run_cfg, r0_sq, var_report):
        v = theory.check_bound(curve, agg)
        verdicts.append((curve, v))
        base = os.path.join(cfg.out_dir, f"bound_{curve.theorem_id}_{tag}")
        with open(base + ".csv", "w") as f:
            _write_curve_csv(f, curve, agg)
        with open(base + ".verdict.txt", "w") as f:
            f.write(v.to_kv_text())
            f.write(f"theorem_id = {curve.theorem_id}\n")
            for k, val in sorted(vars(curve.inputs).items()):
                f.write(f"input.{k} = {val!r}\n")
    return verdicts


def _write_curve_csv(stream, curve, agg) -> None:
    stream.write(f"# theorem_id = {curve.theorem_id}\n")
    stream.write(f"# metric = {curve.metric}\n")
    for k, val in sorted(vars(curve.inputs).items()):
        stream.write(f"# input.{k} = {val!r}\n")
    if curve.notes:
        stream.write(f"# notes = {curve.notes}\n")
    stream.write("t,rhs\n")
    if curve.metric == "dist_sq":
        mask = agg.synced if curve.sync_only else np.ones(agg.t.size, dtype=bool)
        for t in agg.t[mask]:
            stream.write(f"{int(t)},{curve.rhs_at(int(t))!r}\n")
    else:
        stream.write(f"{curve.inputs.T},{curve.final()!r}\n")


def cmd_solve_ref(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    p = resolve_problem(cfg)
    ref = solve_reference(p, cfg.tol, accelerated=cfg.accelerated)
    out = args.out or os.path.join(cfg.out_dir, "reference.txt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w") as f:
        f.write(ref.to_kv_text())
        f.write(f"L = {p.L!r}\nL_component = {p.L_component!r}\n"
                f"mu = {p.mu!r}\nlambda = {p.lam!r}\n")
    print(f"wrote {out} (f* = {ref.f_star!r}, ||grad|| = {ref.grad_norm:.3e})")
    return EXIT_OK


def cmd_plan(args) -> int:
    if args.what == "h":
        H = theory.plan_H(args.rule, args.T, args.M, kappa=args.kappa)
        print(H)
        return EXIT_OK
    pg = theory.plan_gamma(args.rule, L=args.L, mu=args.mu, M=args.M, T=args.T,
                           H=args.H, t_param=args.t_param)
    print(f"{pg.gamma!r}  # satisfies {pg.precondition}"
          + (f"; suggested T >= {pg.suggested_T}" if pg.suggested_T else ""))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(level=args.level)
    for r in results:
        print(r.line())
    failed = [r for r in results if r.failed]
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            json.dump([{"name": r.name, "status": r.status,
                        "details": r.details, "seconds": round(r.seconds, 3)}
                       for r in results], f, indent=2)
        print(f"wrote {args.out}")
    print(f"{sum(r.status == 'PASS' for r in results)} passed, "
          f"{len(failed)} failed, "
          f"{sum(r.status == 'SKIP' for r in results)} skipped")
    return EXIT_CRITERION if failed else EXIT_OK


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    mapping = {
        "M": "M", "T": "T", "batch": "batch", "regime": "regime",
        "gradient_mode": "gradient_mode", "gamma": "gamma_spec",
        "schedule": "schedule_spec", "out_dir": "out_dir", "tol": "tol",
        "noise_sigma": "noise_sigma", "record_every": "record_every",
        "source": "source", "lam": "lam_spec",
    }
    for arg_name, cfg_name in mapping.items():
        val = getattr(args, arg_name, None)
        if val is not None:
            setattr(cfg, cfg_name, val)
    if getattr(args, "H", None):
        cfg.H_list = _parse_int_list(args.H)
    if getattr(args, "seeds", None):
        cfg.seeds = _parse_seeds(args.seeds)


def _add_common(sub):
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--source", help="dataset: 'synthetic' or a manifest name")
    sub.add_argument("--lam", help="l2 coefficient ('1/n' or a float)")
    sub.add_argument("--M", type=int)
    sub.add_argument("--T", type=int)
    sub.add_argument("--H", help="comma list of synchronization intervals")
    sub.add_argument("--batch", type=int)
    sub.add_argument("--regime", choices=["identical", "heterogeneous"])
    sub.add_argument("--gradient-mode", dest="gradient_mode",
                     choices=[m.value for m in GradientMode])
    sub.add_argument("--gamma", help="stepsize: float, 'c/L', or planner rule")
    sub.add_argument("--schedule", help="'uniform', 'one-shot', or 'explicit:...'")
    sub.add_argument("--seeds", help="'a:b' range or comma list")
    sub.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    sub.add_argument("--record-every", dest="record_every", type=int)
    sub.add_argument("--tol", type=float)
    sub.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="localsgd",
        description="Local SGD simulator and convergence-bound verifier")
    sp = ap.add_subparsers(dest="command", required=True)

    v = sp.add_parser("variances", help="sweep sigma quantities over M and batch")
    _add_common(v)
    v.set_defaults(fn=cmd_variances)

    r = sp.add_parser("run", help="run the H sweep with bound verdicts")
    _add_common(r)
    r.set_defaults(fn=cmd_run)

    s = sp.add_parser("solve-ref", help="solve and store the reference optimum")
    _add_common(s)
    s.add_argument("--out", help="output path")
    s.set_defaults(fn=cmd_solve_ref)

    pl = sp.add_parser("plan", help="optimal-H and stepsize planners")
    pl.add_argument("--what", choices=["h", "gamma"], required=True)
    pl.add_argument("--rule", required=True)
    pl.add_argument("--T", type=int)
    pl.add_argument("--M", type=int)
    pl.add_argument("--H", type=int)
    pl.add_argument("--kappa", type=float)
    pl.add_argument("--L", type=float)
    pl.add_argument("--mu", type=float)
    pl.add_argument("--t-param", dest="t_param", type=float)
    pl.set_defaults(fn=cmd_plan)

    ve = sp.add_parser("verify", help="run the acceptance criteria")
    ve.add_argument("--level", choices=["fast", "full"], default="fast")
    ve.add_argument("--out", help="write machine-readable results (JSON)")
    ve.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, configparser.Error, theory.PreconditionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.ManifestError, dataio.LibsvmFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
