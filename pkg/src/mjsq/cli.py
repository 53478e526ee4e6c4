"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 infeasible parameters,
4 an acceptance flag failed, 5 manifest verification failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import AtlasConfig, dual_discrepancy, stationarity_diagnostic
from .config import ConfigError, RunConfig, default_output_dir, verify_manifest, write_manifest
from .core import InfeasibleParameters, Policy, SystemParams
from .ctmc import RecorderConfig, fraction_time_tied, replication_rng, simulate_replications
from .jackson import (
    JacksonSpec,
    LimitLaw,
    closed_form_theta,
    exact_moments,
    limit_mu,
    mjsq_rho,
    pi_n,
    solve_traffic,
    traffic_intensities,
)
from .stats import ci_from_batch_means, compare_policies, corstat_predictions, pi_tilde_start, rr_stationary_start

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_FLAG, EXIT_MANIFEST = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1


_OPEN: list["_Outputs"] = []


class _Outputs:
    """Collects files written for one command so the manifest can list them."""

    def __init__(self, root: Path, command: str, config: RunConfig, figures: bool):
        self.final = Path(root) / f"{command}-{config.digest()[:12]}"
        # written into a staging directory; renamed only once the manifest exists
        self.dir = self.final.with_name(self.final.name + ".partial")
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        self.command, self.config, self.figures = command, config, figures
        self.files: list[Path] = []
        _OPEN.append(self)

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["schema_version", *header])
            for r in rows:
                w.writerow([SCHEMA_VERSION, *(_fmt(v) for v in r)])
        self.files.append(path)
        return path

    def json(self, name: str, obj: dict) -> Path:
        path = self.dir / name
        path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=2, sort_keys=True,
                                   default=_jsonable) + "\n")
        self.files.append(path)
        return path

    def ndjson(self, name: str, records) -> Path:
        path = self.dir / name
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **rec}, sort_keys=True, default=_jsonable) + "\n")
        self.files.append(path)
        return path

    def figure(self, name: str, fn, *args, **kw):
        if self.figures:
            self.files.append(fn(self.dir / name, *args, **kw))

    def finish(self) -> Path:
        write_manifest(self.dir, self.command, self.config, self.files, __version__)
        if self.final.exists():
            shutil.rmtree(self.final)
        self.dir.rename(self.final)
        _OPEN.remove(self)
        return self.final / "manifest.json"

    def abandon(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(type(v).__name__)


def _kv_tokens(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from None


def _system_params(cfg: RunConfig, horizon_default: float = 1.0) -> SystemParams:
    return SystemParams(
        n=cfg.require("system", "n"),
        a=cfg.require("system", "a"),
        b=cfg.require("system", "b"),
        policy=Policy(cfg.get("system", "policy", "mjsq_original")),
        seed=cfg.get("system", "seed", 0),
        horizon=cfg.get("system", "horizon", horizon_default),
        d=cfg.get("system", "d"),
    )


# ----------------------------------------------------------------- exact

def cmd_exact(args, cfg: RunConfig, out_root: Path) -> int:
    out = _Outputs(out_root, "exact", cfg, cfg.get("output", "figures", True))
    summary = {}
    if cfg.get("exact", "jackson"):
        kv = _kv_tokens(cfg.get("exact", "jackson").split())
        spec = JacksonSpec(_floats(kv.get("lambda", "")), _floats(kv.get("mu", "")))
        if "k" in kv and int(kv["k"]) != spec.k:
            raise ConfigError(f"k={kv['k']} does not match {spec.k} rates")
        theta_c = closed_form_theta(spec)
        theta_s = solve_traffic(spec)
        rho = traffic_intensities(spec)
        out.csv("jackson.csv", ["i", "lambda", "mu", "theta_closed_form", "theta_linear_solve", "rho"],
                zip(range(1, spec.k + 1), spec.lam, spec.mu, theta_c, theta_s, rho))
        summary["jackson"] = {"theta": theta_c, "rho": rho}
        print("theta =", np.array2string(theta_c, precision=6), " rho =", np.array2string(rho, precision=6))
    if cfg.get("exact", "limit"):
        kv = _kv_tokens(cfg.get("exact", "limit").split())
        if "a_vec" in kv:
            from .jackson import fixed_k_limit

            law = fixed_k_limit(_floats(kv["a_vec"]))
        else:
            law = limit_mu(float(kv["a"]), float(kv["b"]), int(kv.get("m", 1)))
        out.csv("limit.csv", ["i", "rate", "mean"], zip(range(1, law.m + 1), law.rates, law.mean()))
        summary["limit"] = {"rates": law.rates}
        print("limit rates =", np.array2string(law.rates, precision=6))
    if cfg.get("system", "n") is not None:
        n, a, b = cfg.require("system", "n"), cfg.require("system", "a"), cfg.require("system", "b")
        rho = mjsq_rho(n, a, b)
        means = pi_n(n, a, b).mean()
        out.csv("rho.csv", ["i", "rho", "mean_gap"], zip(range(1, n + 1), rho, means))
        out.figure("rho.png", _plot("rho_figure"), rho, title=f"n={n}, a={a}, b={b}")
        summary["rho_first"] = rho[: min(n, 10)]
        if cfg.get("exact", "moments", False):
            k = min(cfg.get("exact", "k", 5), n)
            m = exact_moments(n, a, b, k_max=k)
            rows = []
            for j in range(1, k + 1):
                pred = corstat_predictions(n, a, b, j)["ranked_k"] if a > b > 0 else None
                rows.append((f"ranked_{j}", m.ranked_k(j), pred))
            if a > b > 0:
                p = corstat_predictions(n, a, b)
                rows += [("imbalance", m.imbalance, p["imbalance"]),
                         ("imbalance_harmonic", m.imbalance, p["imbalance_harmonic"]),
                         ("average", m.average, p["average"])]
            else:
                rows += [("imbalance", m.imbalance, None), ("average", m.average, None)]
            out.csv("moments.csv", ["quantity", "exact", "predicted", "ratio"],
                    [(q, e, p, None if p is None else e / p) for q, e, p in rows])
            for q, e, p in rows:
                print(f"{q:20s} exact={e:.6g}" + ("" if p is None else f"  predicted={p:.6g}  ratio={e / p:.6f}"))
    if not out.files:
        raise ConfigError("exact needs --n/--a/--b, --jackson or --limit")
    out.json("exact.json", summary)
    print(out.finish())
    return EXIT_OK


def _plot(name):
    from . import plotting

    return getattr(plotting, name)


# -------------------------------------------------------------- simulate

def cmd_simulate(args, cfg: RunConfig, out_root: Path) -> int:
    params = _system_params(cfg)
    reps = cfg.get("run", "replications", 1)
    start = cfg.get("run", "start", "stationary")
    if start not in ("stationary", "zero"):
        raise ConfigError(f"[run] start must be 'stationary' or 'zero', got {start!r}")
    if start == "stationary" and params.policy.is_mjsq:
        params.require_stationary_regime()
    init = None
    if start == "stationary":
        init = {Policy.MJSQ_ORIGINAL: pi_tilde_start, Policy.MJSQ_PAUSES: pi_tilde_start,
                Policy.RR: rr_stationary_start}.get(params.policy)
    rec = RecorderConfig(
        batches=cfg.get("recorder", "batches", 20),
        hist_k=cfg.get("recorder", "hist_k", 0),
        hist_bins=cfg.get("recorder", "hist_bins", 0),
        track_labels=cfg.get("recorder", "track_labels", False),
        audit_every=cfg.get("recorder", "audit_every", 0),
    )
    logs = simulate_replications(params, reps, init, rec, cfg.get("run", "workers", args.workers))
    out = _Outputs(out_root, "simulate", cfg, cfg.get("output", "figures", True))

    records = [
        {
            "replication": r,
            "event_count": lg.event_count,
            "horizon": lg.horizon,
            "shortest": lg.gap_means[0],
            "average": lg.average_queue,
            "imbalance": lg.imbalance,
            "fraction_time_tied_pair": fraction_time_tied(lg, "pair"),
            "fraction_time_tied_any": fraction_time_tied(lg, "any"),
            "audit_failures": lg.audit_failures,
        }
        for r, lg in enumerate(logs)
    ]
    keys = list(records[0])
    out.csv("replications.csv", keys, ([rec_[k] for k in keys] for rec_ in records))
    if cfg.get("output", "ndjson", False):
        out.ndjson("replications.ndjson", records)

    # per-gap time averages: batches of one run, or replication means
    if reps >= 2:
        est, hw = ci_from_batch_means(np.stack([lg.gap_means for lg in logs]))
    elif rec.batches >= 2:
        est, hw = ci_from_batch_means(logs[0].batch_gap_means)
    else:
        est, hw = logs[0].gap_means, np.full(params.n, np.nan)
    exact = None
    if params.policy.is_mjsq and params.a > params.b > 0:
        exact = pi_n(params.n, params.a, params.b).mean()
    out.csv("gaps.csv", ["i", "time_average", "half_width", "product_form_mean"],
            zip(range(1, params.n + 1), est, hw, exact if exact is not None else [None] * params.n))
    out.figure("gaps.png", _plot("gap_means_figure"), est, hw, exact,
               title=f"{params.policy.value}, n={params.n}")
    print(f"{reps} replication(s), {sum(lg.event_count for lg in logs)} events")
    print("mean fraction_time_tied (pair):", np.mean([r_["fraction_time_tied_pair"] for r_ in records]))
    print(out.finish())
    return EXIT_FLAG if any(r_["audit_failures"] for r_ in records) else EXIT_OK


# ----------------------------------------------------------------- atlas

def cmd_atlas(args, cfg: RunConfig, out_root: Path) -> int:
    a, b = cfg.require("system", "a"), cfg.require("system", "b")
    if not a > b > 0:
        raise InfeasibleParameters(f"need a > b > 0, got a={a}, b={b}")
    N = cfg.get("atlas", "N", 30)
    T = cfg.get("atlas", "T", 1.0)
    reps = cfg.get("atlas", "replications", 2000)
    k = cfg.get("atlas", "k", 3)
    thr = cfg.get("atlas", "threshold", 0.05)
    seed = cfg.get("system", "seed", 0)
    config = AtlasConfig.for_model(a, b, N, cfg.get("atlas", "dt", 1e-4), T, replications=reps)
    target = limit_mu(a, b, N)
    diag = stationarity_diagnostic(config, target, k, replication_rng(seed, 0))
    out = _Outputs(out_root, "atlas", cfg, cfg.get("output", "figures", True))
    rows = []
    for i in range(k):
        rows.append((i + 1, diag.ks_target[0, i], diag.ks_target[1, i], diag.ks_between[i],
                     diag.p_target[1, i], diag.ks_target[:, i].max() < thr and diag.ks_between[i] < thr))
    report = {"N": N, "a": a, "b": b, "T": T, "replications": reps, "threshold": thr,
              "ks_target": diag.ks_target, "ks_between": diag.ks_between, "pass": diag.passes(thr)}
    ok = diag.passes(thr)
    if cfg.get("atlas", "negative_control", True):
        wrong = LimitLaw(np.concatenate([[a], target.rates[1:]]))
        neg = stationarity_diagnostic(config, wrong, k, replication_rng(seed, 1))
        report["negative_control"] = {"ks_target": neg.ks_target, "ks_between": neg.ks_between,
                                      "rejected": not neg.passes(thr)}
        ok = ok and not neg.passes(thr)
    out.csv("ks.csv", ["gap", "ks_half_T", "ks_T", "ks_between", "p_T", "pass"], rows)
    if cfg.get("atlas", "dual_dts"):
        dts = _floats(cfg.get("atlas", "dual_dts"))
        disc = dual_discrepancy(cfg.get("atlas", "dual_N", 5), a, b, cfg.get("atlas", "dual_T", 0.5), dts,
                                cfg.get("atlas", "dual_paths", 50), replication_rng(seed, 2))
        order = sorted(dts, reverse=True)
        out.csv("dual.csv", ["dt", "mean_sup_discrepancy"], zip(order, disc))
        out.figure("dual.png", _plot("convergence_figure"), order, disc)
        report["dual"] = {"dt": order, "discrepancy": disc}
    if out.figures:
        from .atlas import simulate_unranked

        cfg_t = AtlasConfig(N=N, delta=b, dt=config.dt, T=T, replications=min(reps, 500),
                            initial_law=target, record_times=(T,))
        g = simulate_unranked(cfg_t, replication_rng(seed, 3)).at(T)
        out.figure("marginals.png", _plot("marginal_figure"),
                   {f"gap {i + 1}": g[:, i] for i in range(min(k, 3))},
                   {f"gap {i + 1}": (lambda x, i=i: target.cdf(i, x)) for i in range(min(k, 3))},
                   title=f"gap marginals at T={T}")
    report["pass_all"] = ok
    out.json("diagnostic.json", report)
    for r in rows:
        print("gap {}: KS(T/2)={:.4f} KS(T)={:.4f} KS(T/2 vs T)={:.4f} pass={}".format(r[0], r[1], r[2], r[3], r[5]))
    if "negative_control" in report:
        print("negative control rejected:", report["negative_control"]["rejected"])
    print(out.finish())
    return EXIT_OK if ok else EXIT_FLAG


# --------------------------------------------------------------- compare

def cmd_compare(args, cfg: RunConfig, out_root: Path) -> int:
    params = _system_params(cfg)
    pols = [Policy(p.strip()) for p in cfg.get("compare", "policies", "mjsq_original,rr,jsq").split(",")]
    report = compare_policies(
        params.n, params.a, params.b, pols, horizon=params.horizon,
        replications=cfg.get("run", "replications", 20), seed=params.seed,
        k=cfg.get("compare", "k", 3), d=cfg.get("system", "d", 2),
        workers=cfg.get("run", "workers", args.workers),
    )
    out = _Outputs(out_root, "compare", cfg, cfg.get("output", "figures", True))
    for name, text in (("report.csv", report.to_csv()), ("report.json", report.to_json() + "\n")):
        (out.dir / name).write_text(text)
        out.files.append(out.dir / name)
    out.figure("compare.png", _plot("comparison_figure"), report.rows, "average")
    for r in report.rows:
        if r.metric in ("shortest", "average"):
            pred = "" if r.predicted is None else f" predicted={r.predicted:.6g}"
            print(f"{r.policy:14s} {r.metric:9s} {r.estimate:.6g} ± {r.half_width:.3g}{pred} [{r.prediction}]")
    print(out.finish())
    return EXIT_OK


def cmd_verify(args, cfg, out_root) -> int:
    problems = verify_manifest(args.manifest)
    for p in problems:
        print(p, file=sys.stderr)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return EXIT_OK if not problems else EXIT_MANIFEST


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mjsq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    common.add_argument("--output-dir", help="output root (default: $MJSQ_OUTPUT_DIR or ./mjsq-output)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for replications")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("--seed", type=int)
    sysargs = argparse.ArgumentParser(add_help=False)
    sysargs.add_argument("--n", type=int)
    sysargs.add_argument("--a", type=float)
    sysargs.add_argument("--b", type=float)

    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("exact", parents=[common, sysargs], help="exact stationary quantities")
    e.add_argument("--moments", action="store_true", default=None)
    e.add_argument("--k", type=int)
    e.add_argument("--jackson", nargs="+", metavar="KEY=VALUE", help="k=2 lambda=1,2 mu=3,4")
    e.add_argument("--limit", nargs="+", metavar="KEY=VALUE", help="a=2 b=1 m=5, or a_vec=1,0.5,0.5")
    e.set_defaults(func=cmd_exact)

    s = sub.add_parser("simulate", parents=[common, sysargs], help="CTMC simulation")
    s.add_argument("--policy", choices=[x.value for x in Policy])
    s.add_argument("--d", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--replications", type=int)
    s.add_argument("--start", choices=["stationary", "zero"])
    s.add_argument("--batches", type=int)
    s.set_defaults(func=cmd_simulate)

    at = sub.add_parser("atlas", parents=[common, sysargs], help="reflected Atlas stationarity diagnostic")
    at.add_argument("--N", type=int, dest="N")
    at.add_argument("--dt", type=float)
    at.add_argument("--T", type=float, dest="T")
    at.add_argument("--replications", type=int)
    at.add_argument("--k", type=int)
    at.add_argument("--no-negative-control", action="store_true")
    at.add_argument("--dual-dts", help="comma-separated dt values for the two-representation check")
    at.set_defaults(func=cmd_atlas)

    c = sub.add_parser("compare", parents=[common, sysargs], help="policy comparison report")
    c.add_argument("--policies", help="comma-separated, e.g. mjsq_original,rr,jsq,jsq_d")
    c.add_argument("--d", type=int)
    c.add_argument("--horizon", type=float)
    c.add_argument("--replications", type=int)
    c.add_argument("--k", type=int)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify-manifest", help="re-check artifact digests")
    v.add_argument("manifest", help="manifest.json or its directory")
    v.set_defaults(func=cmd_verify)
    return p


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        ("system", "n"): g("n"), ("system", "a"): g("a"), ("system", "b"): g("b"),
        ("system", "seed"): g("seed"), ("system", "policy"): g("policy"), ("system", "d"): g("d"),
        ("system", "horizon"): g("horizon"),
        ("recorder", "batches"): g("batches"),
        ("run", "start"): g("start"),
        ("output", "figures"): False if g("no_figures") else None,
    }
    if args.command == "atlas":
        ov.update({("atlas", "N"): g("N"), ("atlas", "dt"): g("dt"), ("atlas", "T"): g("T"),
                   ("atlas", "replications"): g("replications"), ("atlas", "k"): g("k"),
                   ("atlas", "negative_control"): False if g("no_negative_control") else None,
                   ("atlas", "dual_dts"): g("dual_dts")})
    else:
        ov[("run", "replications")] = g("replications")
    if args.command == "exact":
        ov.update({("exact", "moments"): g("moments"), ("exact", "k"): g("k"),
                   ("exact", "jackson"): " ".join(args.jackson) if args.jackson else None,
                   ("exact", "limit"): " ".join(args.limit) if args.limit else None})
    if args.command == "compare":
        ov.update({("compare", "policies"): g("policies"), ("compare", "k"): g("k")})
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-manifest":
            return args.func(args, None, None)
        cfg = RunConfig.load(args.config, _overrides(args))
        out_root = Path(args.output_dir) if args.output_dir else default_output_dir()
        return args.func(args, cfg, out_root)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleParameters as exc:
        print(f"infeasible parameters: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        # partial results are never persisted
        while _OPEN:
            _OPEN.pop().abandon()


if __name__ == "__main__":
    sys.exit(main())
