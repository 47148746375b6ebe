"""Named experiments: run, check and persist.

Each experiment writes its CSV data and a ``summary.json`` holding the
computed statistics and a pass/fail entry per check.  Outputs are staged in a
scratch directory and moved into place only when the experiment completes;
on failure the partial outputs land in ``<out>/quarantine``.
"""

import csv
import json
import logging
import os
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .escape import exit_probability, fit_exponent, mean_exit_growth, simulate_scale
from .finite_sample import (RateMonitor, checkpoint_grid, constants_for, envelope_stability,
                            exact_mse_oracle, mse_curve, regret_curve)
from .lyapunov import LyapunovContext, Property1Monitor, decomposition_terms, estimate_drift
from .optimizer import ConfigError, simulate_ensemble
from .rate import (action, euler_action, gaussian_q, h_integral, legendre, legendre_numerical,
                   mean_flow_path)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if np.isfinite(f) else str(f)
    return o


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def _check(passed, **detail):
    return {"pass": bool(passed), **detail}


def _checkpoints(cfg: ExperimentConfig, kp: int):
    run, an = cfg.run, cfg.analysis
    if an["checkpoints"] is not None:
        return np.asarray(an["checkpoints"], dtype=int)
    try:
        grid = checkpoint_grid(kp, run.n_max, an["grid_start"], an["per_octave"])
    except ValueError as e:
        raise ConfigError(f"checkpoint grid: {e}") from e
    tenth = run.n_max // 10
    if tenth >= grid[0]:
        grid = np.unique(np.append(grid, tenth))
    return grid


def _constants(cfg):
    try:
        return constants_for(cfg.run, cfg.analysis["gamma"], cfg.analysis["lambda0"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def run_mse(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    run = cfg.run
    const = _constants(cfg)
    cps = _checkpoints(cfg, const.kappa_plus)
    n = run.n_max
    monitors = []
    lo, mid = n // 100, n // 10
    if lo >= 1:
        monitors.append(RateMonitor(cfg.analysis["gamma"], lo, mid, n))
    ens = simulate_ensemble(run, cps, monitors, workers)
    curve = mse_curve(ens, cps)
    write_csv(os.path.join(out, "mse.csv"), ["n", "mse", "se", "n_mse"],
              [(k, m, s, k * m) for k, m, s in zip(curve.checkpoints, curve.values, curve.se)])
    checks = {}
    summary = {"constants": const.as_dict(), "checkpoints": cps}
    if curve.fit is not None:
        env = envelope_stability(curve)
        summary.update(slope=curve.fit.slope, r2=curve.fit.r2, envelope=curve.fit.envelope,
                       envelope_ratio_top_decade=env)
        checks["slope_in_range"] = _check(-1.2 <= curve.fit.slope <= -0.8, slope=curve.fit.slope)
        checks["fit_r2"] = _check(curve.fit.r2 >= 0.95, r2=curve.fit.r2)
        checks["envelope_stable"] = _check(env < 2.0, ratio=env)
    else:
        summary["note"] = curve.note
    if "rate" in ens.monitors:
        r = ens.monitors["rate"]
        frac = float(np.mean(r["late_max"] <= r["early_max"]))
        summary["as_rate"] = {"gamma": cfg.analysis["gamma"], "window": [lo, mid, n],
                              "fraction_not_increasing": frac}
        checks["as_rate"] = _check(frac >= 0.95, fraction=frac)
    late = ens.last_projection >= const.kappa_plus
    summary["projection_active_after_kappa_plus"] = int(late.sum())
    summary["checks"] = checks
    return summary


def run_regret(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    run = cfg.run
    const = _constants(cfg)
    cps = _checkpoints(cfg, const.kappa_plus)
    base = [0, const.kappa_plus - 1]
    ens = simulate_ensemble(run, np.concatenate([cps, base]), (), workers)
    curve = regret_curve(ens, run.objective, const.kappa_plus, cps)
    write_csv(os.path.join(out, "regret.csv"), ["n", "regret", "se", "regret_from_1"],
              zip(curve.checkpoints, curve.values, curve.se, curve.extra["full"]))
    summary = {"constants": const.as_dict(), "checkpoints": cps,
               "pathwise_monotone": curve.extra["pathwise_monotone"]}
    checks = {}
    if curve.fit is not None:
        summary.update(a=curve.fit.a, b=curve.fit.b, r2=curve.fit.r2)
        checks["fit_r2"] = _check(curve.fit.r2 >= 0.95, r2=curve.fit.r2)
    else:
        summary["note"] = curve.note
    hi, lo = run.n_max, run.n_max // 10
    if lo in set(cps.tolist()):
        got = curve.values[list(cps).index(hi)] / curve.values[list(cps).index(lo)]
        want = np.log(hi) / np.log(lo)
        summary["decade_ratio"] = {"observed": got, "log_ratio": want}
        checks["decade_ratio"] = _check(abs(got / want - 1.0) <= 0.2, observed=got, expected=want)
    summary["checks"] = checks
    return summary


def run_lyapunov(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    run = cfg.run
    const = _constants(cfg)
    cps = _checkpoints(cfg, const.kappa_plus)
    tol = cfg.analysis["tail_tol"]
    ens = simulate_ensemble(run, cps, [Property1Monitor(const.kappa2, tol)], workers)
    ctx = LyapunovContext.from_config(run, tail_tol=tol)
    lam1 = const.lambda1
    rows, t1_scaled, residual_max, drift_ok = [], [], 0.0, []
    for n in cps:
        n = int(n)
        d = estimate_drift(ens, n, lam1, ctx, mode="sample")
        dx = estimate_drift(ens, n, lam1, ctx, mode="exact")
        t = decomposition_terms(ens, n, ctx)
        res = float(np.max(np.abs(t["residual"])))
        residual_max = max(residual_max, res)
        scaled = n * n * (np.abs(t["t1a"]) + np.abs(t["t1b"]))
        s = float(scaled.max())
        t1_scaled.append(s)
        drift_ok.append(d.ok)
        rows.append((n, d.drift, d.drift_se, d.excess, d.excess_se, int(d.ok),
                     n * n * dx.excess, n * n * dx.excess_se, res, s, float(scaled.mean())))
    write_csv(os.path.join(out, "lyapunov.csv"),
              ["n", "drift", "drift_se", "excess", "excess_se", "excess_ok",
               "n2_excess_exact", "n2_excess_exact_se", "residual_max", "n2_t1_max", "n2_t1_mean"], rows)
    p1 = ens.monitors["property1"]
    viol = int(p1["violations"].sum())
    t1_ratio = max(t1_scaled) / min(t1_scaled) if min(t1_scaled) > 0 else float("inf")
    summary = {
        "constants": const.as_dict(), "checkpoints": cps,
        "property1": {"checked": int(p1["checked"].sum()), "violations": viol,
                      "worst_ratio": float(p1["worst_ratio"].max()),
                      "nominal_violations": int(p1["nominal_violations"].sum()),
                      "nominal_worst_ratio": float(p1["nominal_worst_ratio"].max())},
        "residual_max": residual_max, "t1_ratio": t1_ratio,
        "kbar_exact_max": float(max(r[6] for r in rows)),
    }
    summary["checks"] = {
        "property1": _check(viol == 0, violations=viol),
        "cancellation": _check(residual_max <= 1e-12, residual_max=residual_max),
        "drift": _check(all(drift_ok), failing=[int(n) for n, ok in zip(cps, drift_ok) if not ok]),
        "t1_scaling": _check(t1_ratio < 5.0, ratio=t1_ratio),
    }
    return summary


def run_oracle(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    run = cfg.run
    an = cfg.analysis
    cps = an["checkpoints"] or [n for n in (10, 100, 1000, 10000) if n <= run.n_max]
    cps = np.asarray(cps, dtype=int)
    ens = simulate_ensemble(run, cps, (), workers)
    curve = mse_curve(ens, cps)
    spec = run.objective
    b = float(spec.B[0, 0])
    sigma = float(spec.gain.sigma) * float(np.sqrt(run.noise.R0[0, 0]))
    e0 = float(run.theta0[0] - spec.theta_star[0])
    rows, zs = [], []
    for n, m, s in zip(cps, curve.values, curve.se):
        o = exact_mse_oracle(b, sigma, e0, run.c0, int(n))
        z = (m - o) / s if s > 0 else (0.0 if m == o else float("inf"))
        zs.append(z)
        rows.append((n, m, s, o, z))
    write_csv(os.path.join(out, "oracle.csv"), ["n", "mc_mse", "se", "oracle", "z"], rows)
    worst = float(np.max(np.abs(zs)))
    return {"checkpoints": cps, "z": zs, "projection_hits": int(ens.projection_count.sum()),
            "checks": {"within_3se": _check(worst <= 3.0, worst_abs_z=worst)}}


def _scale_job(args):
    esc, n, i = args
    return simulate_scale(esc, n, i)


def run_escape(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    esc = cfg.escape
    jobs = [(esc, n, i) for i, n in enumerate(esc.n_list)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as ex:
            results = list(ex.map(_scale_job, jobs))
    else:
        results = [_scale_job(j) for j in jobs]
    samples = {s.n: s for s in results}
    growth = mean_exit_growth(samples, esc.T)
    rows, probs = [], []
    for n, lb in zip(growth.ns, growth.lower_bounds):
        s = samples[n]
        pr = exit_probability(s)
        probs.append(pr)
        rows.append((n, pr.replications, pr.count, pr.p_hat, pr.ci_lo, pr.ci_hi, lb, int(s.exited.sum())))
    write_csv(os.path.join(out, "escape.csv"),
              ["n", "replications", "exits", "p_hat", "ci_lo", "ci_hi", "mean_tau_lb", "g_exits"], rows)
    fit = fit_exponent(growth.ns, [p.p_hat for p in probs])
    # nonincreasing up to CI overlap: a later p_hat may exceed an earlier one only
    # if the two intervals overlap
    mono = all(b.p_hat <= a.p_hat or b.ci_lo <= a.ci_hi for a, b in zip(probs, probs[1:]))
    Q = gaussian_q(esc.objective, esc.noise)
    summary = {
        "Q": Q, "h0_hat": fit.h, "h0_r2": fit.r2, "h0_scales": fit.used, "starved": fit.starved,
        "h0_note": fit.note, "h1_hat": growth.fit.h if growth.fit else None,
        "tau_lower_bounds": growth.lower_bounds, "tau_informative": growth.informative,
        "tau_note": growth.note,
    }
    checks = {"p_nonincreasing": _check(mono)}
    if fit.h is not None:
        checks["h0_positive_fit"] = _check(fit.h > 0 and fit.r2 >= 0.9, h0=fit.h, r2=fit.r2)
    else:
        checks["h0_positive_fit"] = _check(False, note=fit.note)
    checks["tau_nondecreasing"] = _check(growth.nondecreasing, informative=any(growth.informative))
    summary["checks"] = checks
    return summary


def _rate_rng(seed):
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(b"rate")]))


def run_rate(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    spec, model = cfg.objective, cfg.noise
    r = cfg.rate
    T, m, mode = r["T"], r["segments"], r["drift_mode"]
    Q = gaussian_q(spec, model)
    Q0 = gaussian_q(spec, model, covariance=model.R0)
    p = spec.p
    alpha = np.ones((m, p))
    h_bar, h_0 = h_integral(Q, alpha, T), h_integral(Q0, alpha, T)
    rng = _rate_rng(cfg.seed)
    worst = 0.0
    for _ in range(r["instances"]):
        q = int(rng.integers(1, 4))
        M = rng.standard_normal((q, q))
        Qi = M @ M.T + 0.1 * np.eye(q)
        beta, drift = rng.standard_normal(q), rng.standard_normal(q)
        s = float(rng.uniform(0.0, 2.0))
        a, b = legendre(Qi, beta, drift, s), legendre_numerical(Qi, beta, drift, s)
        worst = max(worst, abs(a - b))
    rows, actions = [], {}
    checks = {"legendre_vs_numerical": _check(worst <= 1e-6, max_abs_diff=worst)}
    zero = np.zeros((m + 1, p))
    s0 = action(zero, T, Q, spec, mode)
    actions["rest_at_minimiser"] = {"kind": "mean-flow", "action": s0, "euler_action": euler_action(zero, T, Q, spec, mode)}
    for pth in r["paths"]:
        if pth["kind"] == "held":
            path = np.broadcast_to(np.asarray(pth["value"], dtype=float), (m + 1, p))
        else:
            path = mean_flow_path(spec, pth["start"], T, m, mode)
        sg = action(path, T, Q, spec, mode)
        se = euler_action(path, T, Q, spec, mode)
        sg2 = action(_refine(path), T, Q, spec, mode)
        actions[pth["name"]] = {"kind": pth["kind"], "action": sg, "euler_action": se,
                                "refined_action": sg2}
        rows.append((pth["name"], pth["kind"], sg, se, sg2))
    with open(os.path.join(out, "rate.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "kind", "action", "euler_action", "refined_action"])
        for name, kind, *vals in rows:
            w.writerow([name, kind] + [_num(v) for v in vals])
    mf = [a for a in actions.values() if a["kind"] == "mean-flow"]
    checks["mean_flow_zero"] = _check(all(abs(a["euler_action"]) <= 1e-12 for a in mf) and s0 == 0.0)
    held = [(pth, actions[pth["name"]]) for pth in r["paths"] if pth["kind"] == "held"]
    checks["held_positive"] = _check(all(a["action"] > 0 for pth, a in held
                                         if np.any(np.asarray(pth["value"]) != 0)))
    summary = {"Q": Q, "Q_R0": Q0, "h_integral_unit_alpha": h_bar, "h_integral_R0": h_0,
               "legendre_max_abs_diff": worst, "actions": actions, "drift_mode": mode}
    if model.kind == "iid-gaussian":
        checks["iid_specialisation"] = _check(h_bar == h_0, h_rbar=h_bar, h_r0=h_0)
    summary["checks"] = checks
    return summary


def _refine(path):
    """Insert segment midpoints: the same polygon on a grid twice as fine."""
    mid = 0.5 * (path[:-1] + path[1:])
    out = np.empty((2 * len(path) - 1,) + path.shape[1:])
    out[0::2], out[1::2] = path, mid
    return out


RUNNERS = {"mse": run_mse, "regret": run_regret, "lyapunov": run_lyapunov,
           "oracle-check": run_oracle, "escape": run_escape, "rate": run_rate}


def provenance(cfg: ExperimentConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "package": "mixsgd", "version": __version__,
            "experiment": cfg.kind, "seed": cfg.seed,
            "seed_derivation": "SeedSequence([seed, crc32(kind)] or seed, spawn_key=(scale, replication))"}


def run_experiment(cfg: ExperimentConfig, out: str, workers: int = 1) -> dict:
    """Run ``cfg`` and write its artifacts into ``out``; returns the summary."""
    os.makedirs(out, exist_ok=True)
    stage = os.path.join(out, ".staging")
    shutil.rmtree(stage, ignore_errors=True)
    os.makedirs(stage)
    write_json(os.path.join(stage, "config.json"), cfg.resolved)
    write_json(os.path.join(stage, "provenance.json"), provenance(cfg))
    try:
        body = RUNNERS[cfg.kind](cfg, stage, workers)
    except BaseException as e:
        q = os.path.join(out, "quarantine")
        shutil.rmtree(q, ignore_errors=True)
        os.replace(stage, q)
        with open(os.path.join(q, "error.txt"), "w", encoding="utf-8") as f:
            f.write(f"{type(e).__name__}: {e}\n")
        raise
    summary = {"schema_version": SCHEMA_VERSION, "experiment": cfg.kind, "seed": cfg.seed, **body}
    summary["all_passed"] = all(c["pass"] for c in body.get("checks", {}).values())
    write_json(os.path.join(stage, "summary.json"), summary)
    for name in sorted(os.listdir(stage)):
        os.replace(os.path.join(stage, name), os.path.join(out, name))
    os.rmdir(stage)
    shutil.rmtree(os.path.join(out, "quarantine"), ignore_errors=True)
    return summary
