"""JSON experiment configuration: schema, defaults and validation.

Every section is checked for unknown keys, and every nested object is built
(and so validated) before an experiment starts.  ``resolved`` holds the
configuration with all defaults filled in; it is echoed into the output
directory for provenance.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .escape import EscapeConfig
from .noise import NoiseModel, make_model
from .objectives import Gain, ObjectiveSpec
from .optimizer import ConfigError, ProjectionSet, RunConfig, default_projection

KINDS = ("mse", "regret", "lyapunov", "escape", "rate", "oracle-check")

OBJECTIVE_KEYS = {"B", "theta_star", "K_D", "alpha", "gain"}
GAIN_KEYS = {"kind", "sigma", "cap", "matrix"}
NOISE_KEYS = {"kind", "covariance", "innovation_covariance", "A", "ma_coefficients", "truncation"}
PROJECTION_KEYS = {"kind", "radius"}
RUN_KEYS = {"n_max", "theta0", "c0", "replications"}
ANALYSIS_KEYS = {"gamma", "lambda0", "checkpoints", "grid_start", "per_octave", "tail_tol"}
ESCAPE_KEYS = {"G_radius", "mu", "nu", "T", "n_list", "replications", "start"}
RATE_KEYS = {"T", "segments", "drift_mode", "instances", "paths"}
PATH_KEYS = {"name", "kind", "value", "start"}

SECTIONS = {
    "mse": {"objective", "noise", "projection", "run", "analysis"},
    "regret": {"objective", "noise", "projection", "run", "analysis"},
    "lyapunov": {"objective", "noise", "projection", "run", "analysis"},
    "oracle-check": {"objective", "noise", "projection", "run", "analysis"},
    "escape": {"objective", "noise", "escape"},
    "rate": {"objective", "noise", "rate"},
}
TOP_KEYS = {"experiment", "seed"}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    resolved: dict
    objective: Optional[ObjectiveSpec] = None
    noise: Optional[NoiseModel] = None
    run: Optional[RunConfig] = None
    escape: Optional[EscapeConfig] = None
    analysis: dict = field(default_factory=dict)
    rate: dict = field(default_factory=dict)


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"missing required key {where}.{key}")
    return d[key]


def _arr(v):
    return None if v is None else np.asarray(v, dtype=float).tolist()


def build_objective(d):
    _check_keys(d, OBJECTIVE_KEYS, "objective")
    g = dict(d.get("gain", {}))
    _check_keys(g, GAIN_KEYS, "objective.gain")
    gain_res = {"kind": g.get("kind", "constant"), "sigma": float(g.get("sigma", 1.0)),
                "cap": float(g.get("cap", 1.0)), "matrix": _arr(g.get("matrix"))}
    res = {"B": _arr(_require(d, "B", "objective")),
           "theta_star": _arr(_require(d, "theta_star", "objective")),
           "K_D": float(d.get("K_D", 0.0)), "alpha": float(d.get("alpha", 1.0)), "gain": gain_res}
    try:
        gain = Gain(**gain_res)
        spec = ObjectiveSpec(res["B"], res["theta_star"], res["K_D"], res["alpha"], gain)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"objective: {e}") from e
    return spec, res


def build_noise(d):
    _check_keys(d, NOISE_KEYS, "noise")
    res = {k: v for k, v in d.items()}
    res.setdefault("truncation", None)
    kind = _require(d, "kind", "noise")
    params = {k: v for k, v in d.items() if k != "kind" and v is not None}
    try:
        model = make_model(kind, params)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"noise: {e}") from e
    return model, res


def build_projection(d, theta_star):
    if d is None:
        pset = default_projection(theta_star)
    else:
        _check_keys(d, PROJECTION_KEYS, "projection")
        try:
            pset = ProjectionSet(d.get("kind", "box"), float(_require(d, "radius", "projection")))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"projection: {e}") from e
    return pset, {"kind": pset.kind, "radius": pset.radius}


def parse_dict(raw: dict, kind: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    _check_keys(raw, TOP_KEYS | set().union(*SECTIONS.values()), "config")
    kind = kind or raw.get("experiment")
    if kind not in KINDS:
        raise ConfigError(f"experiment kind must be one of {', '.join(KINDS)}, got {kind!r}")
    if raw.get("experiment") not in (None, kind):
        raise ConfigError(f"config declares experiment {raw['experiment']!r} but {kind!r} was requested")
    extra = sorted(set(raw) - TOP_KEYS - SECTIONS[kind])
    if extra:
        raise ConfigError(f"section(s) not used by {kind}: {', '.join(extra)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    spec, obj_res = build_objective(_require(raw, "objective", "config"))
    model, noise_res = build_noise(_require(raw, "noise", "config"))
    if model.p != spec.p:
        raise ConfigError("objective and noise dimensions disagree")
    resolved = {"experiment": kind, "seed": seed, "objective": obj_res, "noise": noise_res}
    cfg = ExperimentConfig(kind, seed, resolved, spec, model)

    if "run" in SECTIONS[kind]:
        pset, proj_res = build_projection(raw.get("projection"), spec.theta_star)
        run = dict(_require(raw, "run", "config"))
        _check_keys(run, RUN_KEYS, "run")
        run_res = {"n_max": int(_require(run, "n_max", "run")),
                   "theta0": _arr(run.get("theta0", spec.theta_star.tolist())),
                   "c0": float(run.get("c0", 1.0)),
                   "replications": int(run.get("replications", 100))}
        cfg.run = RunConfig(spec, model, pset, run_res["n_max"], run_res["theta0"], run_res["c0"],
                            seed, run_res["replications"])
        an = dict(raw.get("analysis", {}))
        _check_keys(an, ANALYSIS_KEYS, "analysis")
        lam = run_res["c0"] * spec.lam
        an_res = {"gamma": float(an.get("gamma", 0.25)),
                  "lambda0": float(an["lambda0"]) if an.get("lambda0") is not None else (lam - 1.0) / 2.0,
                  "checkpoints": an.get("checkpoints"),
                  "grid_start": int(an.get("grid_start", 100)),
                  "per_octave": int(an.get("per_octave", 2)),
                  "tail_tol": float(an.get("tail_tol", 1e-12))}
        if not 0.0 <= an_res["gamma"] < 0.5:
            raise ConfigError("gamma must lie in [0, 1/2)")
        if not 0.0 < an_res["lambda0"] < lam - 1.0:
            raise ConfigError("A4 requires 0 < lambda0 < c0*lambda_min(B) - 1")
        if an_res["checkpoints"] is not None:
            an_res["checkpoints"] = sorted({int(n) for n in an_res["checkpoints"]})
            if an_res["checkpoints"][0] < 1 or an_res["checkpoints"][-1] > run_res["n_max"]:
                raise ConfigError("checkpoints must lie in [1, n_max]")
        if kind == "oracle-check":
            if spec.p != 1 or model.kind != "iid-gaussian" or spec.gain.kind != "constant" or spec.K_D:
                raise ConfigError("oracle-check needs a 1-D quadratic objective, constant gain and iid noise")
            if model.truncated:
                raise ConfigError("oracle-check needs untruncated noise")
        cfg.analysis = an_res
        resolved.update(projection=proj_res, run=run_res, analysis=an_res)

    if kind == "escape":
        esc = dict(_require(raw, "escape", "config"))
        _check_keys(esc, ESCAPE_KEYS, "escape")
        esc_res = {"G_radius": float(_require(esc, "G_radius", "escape")),
                   "mu": float(esc.get("mu", 0.8 * float(esc["G_radius"]))),
                   "nu": float(_require(esc, "nu", "escape")),
                   "T": float(_require(esc, "T", "escape")),
                   "n_list": [int(n) for n in _require(esc, "n_list", "escape")],
                   "replications": int(esc.get("replications", 1000)),
                   "start": esc.get("start", "uniform")}
        cfg.escape = EscapeConfig(spec, model, esc_res["G_radius"], esc_res["mu"], esc_res["nu"],
                                  esc_res["T"], tuple(esc_res["n_list"]), esc_res["replications"],
                                  seed, esc_res["start"])
        resolved["escape"] = esc_res

    if kind == "rate":
        r = dict(raw.get("rate", {}))
        _check_keys(r, RATE_KEYS, "rate")
        paths = []
        for i, pth in enumerate(r.get("paths", [])):
            _check_keys(pth, PATH_KEYS, f"rate.paths[{i}]")
            pk = pth.get("kind", "held")
            if pk not in ("held", "mean-flow"):
                raise ConfigError(f"rate.paths[{i}].kind must be 'held' or 'mean-flow'")
            key = "value" if pk == "held" else "start"
            paths.append({"name": pth.get("name", f"path{i}"), "kind": pk,
                          key: _arr(np.atleast_1d(_require(pth, key, f"rate.paths[{i}]")))})
        rate_res = {"T": float(r.get("T", 1.0)), "segments": int(r.get("segments", 64)),
                    "drift_mode": r.get("drift_mode", "gradient"),
                    "instances": int(r.get("instances", 100)), "paths": paths}
        if rate_res["drift_mode"] not in ("gradient", "literal"):
            raise ConfigError("rate.drift_mode must be 'gradient' or 'literal'")
        if not rate_res["T"] > 0 or rate_res["segments"] < 1:
            raise ConfigError("rate.T must be positive and rate.segments >= 1")
        cfg.rate = rate_res
        resolved["rate"] = rate_res
    return cfg


def parse_config(path, kind: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_dict(raw, kind, seed)
