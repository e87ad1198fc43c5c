"""Config-driven command line front end.

Every run is determined by a run configuration assembled from an optional
YAML file plus command line flags (flags win). Results land in the output
directory as records.ndjson (one JSON object per line, keys sorted),
summary.csv (key,value rows) and manifest.json. Each record carries
{seed, replicate, config_digest}, and a rerun of the same configuration
writes byte-identical records regardless of the worker count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import itertools
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from .deviations import (DensityRecord, ExtremeRecord, ExtremesReport,
                         assumption_mg_probe, density_records,
                         extreme_records, predicted_speed, summarize_density)
from .environments import constant, iid_seeded, periodic
from .errors import BranchkitError
from .growth import RateFunctionEvaluator, growth_report
from .kernels import many_to_one_check
from .lln import lln_experiment
from .models import BranchingModel, FiniteModel, OffspringCountLaw, builtin, neutral_gw
from .rng import replicate_generator
from .simulate import simulate

DEFAULT_CAP = 10_000_000
DEFAULT_REPLICATES = 100
DEFAULT_OUT = "branchkit-out"
DEFAULT_BEAM = 30_000

EXPERIMENTS = ("simulate", "check-m2o", "growth", "lln", "local-density",
               "extremes", "probe-mg")
MODEL_NAMES = ("two-type-m2", "kimmel", "brw", "neutral-gw")
# these need exact semigroup or path enumeration, hence a finite trait space
FINITE_ONLY = ("check-m2o", "growth", "lln")
# per-replicate record producers; safe to shard across worker processes
PARALLEL = ("simulate", "local-density", "extremes")

_SIM_TAG = 0x5111

_PARAM_KEYS = {
    "simulate": {"n", "x0"},
    "check-m2o": {"n", "x0"},
    "growth": {"n", "x0", "variational"},
    "lln": {"ladder", "x0", "f", "fn"},
    "local-density": {"ladder", "x0", "a_n"},
    "extremes": {"ladder", "x0", "beam"},
    "probe-mg": {"p", "b", "q", "line", "horizon", "target_rate", "epsilon",
                 "aux_rate", "x0"},
}
_FLAG_PARAMS = ("n", "x0", "variational", "ladder", "f", "fn", "a_n", "beam",
                "p", "b", "q", "line", "horizon", "target_rate", "epsilon",
                "aux_rate")


# ---------------------------------------------------------- value parsing

def _parse_number(text):
    try:
        return int(text)
    except (TypeError, ValueError):
        return float(text)


def _parse_ladder(value) -> List[int]:
    if isinstance(value, str):
        value = [p for p in value.split(",") if p.strip()]
    return [int(v) for v in value]


def _parse_floats(value) -> List[float]:
    if isinstance(value, str):
        value = [p for p in value.split(",") if p.strip()]
    return [float(v) for v in value]


def _parse_schedule(value) -> Tuple[str, float]:
    """Threshold schedule a_n: "const:1", "linear:0.8", or an equivalent
    mapping/pair from a config file."""
    if isinstance(value, str):
        kind, _, arg = value.partition(":")
        if kind not in ("const", "linear") or not arg:
            raise ValueError(
                "expected const:<level> or linear:<slope>, e.g. const:1")
        return kind, float(arg)
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind not in ("const", "linear") or "value" not in value:
            raise ValueError("expected {kind: const|linear, value: <number>}")
        return kind, float(value["value"])
    kind, arg = value
    if kind not in ("const", "linear"):
        raise ValueError("expected a const or linear schedule")
    return str(kind), float(arg)


def _parse_increment(value) -> Tuple:
    """Step law for the walk: normal:<mu>,<sd>, rademacher, or drift:<step>."""
    if isinstance(value, str):
        kind, _, arg = value.partition(":")
        if kind == "rademacher":
            return ("rademacher",)
        if kind == "normal":
            mu, sd = _parse_floats(arg or "0,1")
            return ("normal", mu, sd)
        if kind == "drift":
            return ("drift", float(arg or 1.0))
        raise ValueError(
            "expected normal:<mu>,<sd>, rademacher, or drift:<step>")
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind == "rademacher":
            return ("rademacher",)
        if kind == "normal":
            return ("normal", float(value.get("mu", 0.0)),
                    float(value.get("sd", 1.0)))
        if kind == "drift":
            return ("drift", float(value.get("step", 1.0)))
        raise ValueError("expected kind normal, rademacher, or drift")
    value = tuple(value)
    if not value or value[0] not in ("normal", "rademacher", "drift"):
        raise ValueError("expected kind normal, rademacher, or drift")
    return (value[0],) + tuple(float(v) for v in value[1:])


def _parse_f(value, model) -> dict:
    """Trait functional for the proportion experiment."""
    if isinstance(value, str):
        kind, _, arg = value.partition(":")
        if kind == "identity":
            desc = {"kind": "identity"}
        elif kind == "indicator":
            if not arg:
                raise ValueError("indicator needs an atom, e.g. indicator:1")
            desc = {"kind": "indicator", "atom": _parse_number(arg)}
        else:
            raise ValueError("expected identity or indicator:<atom>")
    elif isinstance(value, dict):
        kind = value.get("kind")
        if kind == "identity":
            desc = {"kind": "identity"}
        elif kind == "indicator":
            if "atom" not in value:
                raise ValueError("indicator needs an atom")
            desc = {"kind": "indicator", "atom": value["atom"]}
        else:
            raise ValueError("expected kind identity or indicator")
    else:
        raise ValueError("expected identity or indicator:<atom>")
    atoms = getattr(getattr(model, "space", None), "atoms", None)
    if desc["kind"] == "indicator" and atoms is not None:
        if not any(a == desc["atom"] for a in atoms):
            raise ValueError(
                f"indicator atom {desc['atom']!r} is not a trait atom")
    return desc


def _f_callable(desc: dict):
    if desc["kind"] == "identity":
        return lambda v: float(v)
    atom = desc["atom"]
    return lambda v: 1.0 if v == atom else 0.0


def _parse_fn(value) -> dict:
    """Trait rescaling applied before the functional."""
    if isinstance(value, str):
        kind, _, arg = value.replace("(", ":").rstrip(")").partition(":")
        if kind == "id":
            return {"kind": "id"}
        if kind == "log-over-n":
            return {"kind": "log-over-n"}
        if kind == "affine":
            parts = _parse_floats(arg)
            if len(parts) != 2:
                raise ValueError("affine needs two numbers, e.g. affine:2,1")
            return {"kind": "affine", "a": parts[0], "b": parts[1]}
        raise ValueError("expected id, affine:a,b or log-over-n")
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind == "id":
            return {"kind": "id"}
        if kind == "log-over-n":
            return {"kind": "log-over-n"}
        if kind == "affine":
            return {"kind": "affine", "a": float(value.get("a", 1.0)),
                    "b": float(value.get("b", 0.0))}
        raise ValueError("expected kind id, affine or log-over-n")
    raise ValueError("expected id, affine:a,b or log-over-n")


def _fn_callable(desc: dict, horizon: int):
    if desc["kind"] == "id":
        return None
    if desc["kind"] == "affine":
        a, b = desc["a"], desc["b"]
        return lambda z: a * float(z) + b
    # log-over-n: the ladder's horizon sets the normalization
    return lambda z: math.log(z) / horizon


# ----------------------------------------------------------- normalization

def _normalize_model(mc):
    """Returns (model config, built model, errors)."""
    if mc is None:
        return None, None, ["model: required"]
    if isinstance(mc, str):
        mc = {"name": mc}
    if not isinstance(mc, dict):
        return None, None, ["model: expected a name or a mapping"]
    name = mc.get("name")
    if name is None:
        return None, None, ["model.name: required"]
    if name not in MODEL_NAMES:
        return None, None, [
            f"model.name: unknown model {name!r}; valid names are "
            + ", ".join(MODEL_NAMES)]

    errors: List[str] = []
    cfg = {"name": name}
    if name == "kimmel":
        lam = mc.get("lambda", mc.get("lam"))
        if lam is None:
            errors.append("model.lambda: required for kimmel")
        elif isinstance(lam, bool) or not isinstance(lam, (int, float)) \
                or lam <= 0:
            errors.append("model.lambda: lambda must be > 0")
        else:
            cfg["lambda"] = float(lam)
    elif name == "brw":
        off = mc.get("offspring", "binary")
        if off == "binary":
            cfg["offspring"] = "binary"
        elif isinstance(off, int) and not isinstance(off, bool) and off >= 1:
            cfg["offspring"] = off
        else:
            errors.append(
                "model.offspring: expected 'binary' or a positive integer")
        try:
            cfg["increment"] = list(
                _parse_increment(mc.get("increment", ("normal", 0.0, 1.0))))
        except (TypeError, ValueError) as ex:
            errors.append(f"model.increment: {ex}")
    elif name == "neutral-gw":
        atoms = mc.get("atoms")
        if not isinstance(atoms, (list, tuple)) or not atoms:
            errors.append("model.atoms: required list of trait values")
            atoms = None
        else:
            cfg["atoms"] = [_parse_number(str(a)) for a in atoms]
        chain = mc.get("chain")
        arr = None
        if chain is None:
            errors.append("model.chain: required row-stochastic matrix")
        else:
            try:
                arr = np.asarray(chain, dtype=float)
            except (TypeError, ValueError):
                errors.append("model.chain: expected a numeric matrix")
        if arr is not None and atoms is not None:
            d = len(atoms)
            if arr.shape != (d, d) or np.any(arr < 0) \
                    or not np.allclose(arr.sum(axis=1), 1.0, atol=1e-9):
                errors.append(
                    "model.chain: expected a row-stochastic d x d matrix "
                    "over the atoms")
            else:
                cfg["chain"] = [[float(v) for v in row] for row in arr]
        cnt, cnt_errors = _normalize_count(mc.get("count"))
        errors.extend(cnt_errors)
        if cnt is not None:
            cfg["count"] = cnt

    known = {"name", "lambda", "lam", "offspring", "increment", "atoms",
             "chain", "count"}
    for key in sorted(set(mc) - known):
        errors.append(f"model.{key}: not a recognized field")
    if errors:
        return None, None, errors
    try:
        model = _build_model(cfg)
    except (ValueError, BranchkitError) as ex:
        return None, None, [f"model: {ex}"]
    return cfg, model, []


def _normalize_count(cnt):
    if cnt is None:
        return None, ["model.count: required for neutral-gw"]
    if not isinstance(cnt, dict) or "kind" not in cnt:
        return None, ["model.count: expected {kind: poisson|geometric|"
                      "deterministic|table, ...}"]
    kind = cnt["kind"]
    if kind == "poisson":
        lam = cnt.get("lambda", cnt.get("lam"))
        if lam is None or isinstance(lam, bool) or \
                not isinstance(lam, (int, float)) or lam <= 0:
            return None, ["model.count.lambda: poisson rate must be > 0"]
        return {"kind": "poisson", "lambda": float(lam)}, []
    if kind == "geometric":
        p = cnt.get("p")
        if p is None or isinstance(p, bool) or not isinstance(p, (int, float)) \
                or not 0 < p < 1:
            return None, ["model.count.p: expected a value in (0, 1)"]
        return {"kind": "geometric", "p": float(p)}, []
    if kind == "deterministic":
        k = cnt.get("k")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            return None, ["model.count.k: expected a positive integer"]
        return {"kind": "deterministic", "k": k}, []
    if kind == "table":
        entries = cnt.get("entries")
        try:
            pairs = [(int(k), float(p)) for k, p in entries]
        except (TypeError, ValueError):
            return None, ["model.count.entries: expected [count, prob] pairs"]
        if not pairs or any(k < 0 or p < 0 for k, p in pairs) \
                or abs(sum(p for _, p in pairs) - 1.0) > 1e-9:
            return None, ["model.count.entries: probabilities must be "
                          "nonnegative and sum to 1"]
        return {"kind": "table", "entries": [[k, p] for k, p in pairs]}, []
    return None, [f"model.count.kind: unknown kind {kind!r}"]


def _count_law(cnt: dict) -> OffspringCountLaw:
    if cnt["kind"] == "poisson":
        return OffspringCountLaw.poisson(cnt["lambda"])
    if cnt["kind"] == "geometric":
        return OffspringCountLaw.geometric(cnt["p"])
    if cnt["kind"] == "deterministic":
        return OffspringCountLaw.deterministic(cnt["k"])
    return OffspringCountLaw.table([tuple(e) for e in cnt["entries"]])


def _build_model(cfg: dict) -> BranchingModel:
    name = cfg["name"]
    if name == "two-type-m2":
        return builtin("two-type-m2")
    if name == "kimmel":
        return builtin("kimmel", lam=cfg["lambda"])
    if name == "brw":
        return builtin("brw", offspring=cfg["offspring"],
                       increment=tuple(cfg["increment"]))
    return neutral_gw(_count_law(cfg["count"]), list(cfg["atoms"]),
                      np.asarray(cfg["chain"], dtype=float))


def _parse_env_flag(text: str) -> dict:
    kind, _, rest = text.partition(":")
    if kind == "constant":
        return {"kind": "constant", "token": int(rest)} if rest else \
            {"kind": "constant"}
    if kind == "periodic":
        return {"kind": "periodic", "order": [int(v) for v in rest.split(",")
                                              if v.strip()]}
    if kind == "iid":
        order, _, env_seed = rest.partition(":")
        cfg = {"kind": "iid", "order": [int(v) for v in order.split(",")
                                        if v.strip()]}
        cfg["env_seed"] = int(env_seed) if env_seed else 0
        return cfg
    return {"kind": kind}


def _normalize_env(ec, model):
    """Returns (environment config, errors)."""
    if ec is None:
        ec = {"kind": "constant"}
    if isinstance(ec, str):
        try:
            ec = _parse_env_flag(ec)
        except ValueError:
            return None, [f"environment: could not parse {ec!r}"]
    if not isinstance(ec, dict):
        return None, ["environment: expected a kind or a mapping"]
    kind = ec.get("kind", "constant")
    if kind not in ("constant", "periodic", "iid"):
        return None, [f"environment.kind: unknown kind {kind!r}; valid "
                      "kinds are constant, periodic, iid"]

    errors: List[str] = []
    cfg = {"kind": kind}
    size = len(model.env_alphabet) if model is not None else None

    def _index_ok(i):
        return isinstance(i, int) and not isinstance(i, bool) and i >= 0 \
            and (size is None or i < size)

    if kind == "constant":
        tok = ec.get("token", 0)
        if _index_ok(tok):
            cfg["token"] = tok
        else:
            errors.append("environment.token: expected an index into the "
                          "model's token alphabet")
    else:
        order = ec.get("order")
        if not isinstance(order, (list, tuple)) or not order \
                or not all(_index_ok(i) for i in order):
            errors.append("environment.order: expected a nonempty list of "
                          "indices into the model's token alphabet")
        else:
            cfg["order"] = [int(i) for i in order]
        if kind == "iid":
            env_seed = ec.get("env_seed", 0)
            if isinstance(env_seed, int) and not isinstance(env_seed, bool) \
                    and env_seed >= 0:
                cfg["env_seed"] = env_seed
            else:
                errors.append(
                    "environment.env_seed: expected a nonnegative integer")
            weights = ec.get("weights")
            if weights is not None:
                try:
                    ws = [float(w) for w in weights]
                except (TypeError, ValueError):
                    ws = None
                if not ws or (isinstance(order, (list, tuple))
                              and len(ws) != len(order)) \
                        or any(w < 0 for w in ws) or sum(ws) <= 0:
                    errors.append("environment.weights: expected nonnegative "
                                  "weights aligned with order")
                else:
                    cfg["weights"] = ws
    known = {"kind", "token", "order", "env_seed", "weights"}
    for key in sorted(set(ec) - known):
        errors.append(f"environment.{key}: not a recognized field")
    if errors:
        return None, errors
    return cfg, []


def _build_env(model: BranchingModel, cfg: dict):
    alph = model.env_alphabet
    if cfg["kind"] == "constant":
        return constant(alph[cfg.get("token", 0)])
    toks = [alph[i] for i in cfg["order"]]
    if cfg["kind"] == "periodic":
        return periodic(toks)
    return iid_seeded(toks, cfg["env_seed"], cfg.get("weights"))


def _default_x0(model: BranchingModel):
    if isinstance(model, FiniteModel):
        return model.space.atoms[0]
    if model.name == "kimmel":
        return 1
    return 0.0


def _normalize_params(exp, raw, model):
    """Collect experiment parameters from top level and params mapping."""
    errors: List[str] = []
    nested = raw.get("params", {})
    if nested is None:
        nested = {}
    if not isinstance(nested, dict):
        return {}, ["params: expected a mapping"]
    supplied = dict(nested)
    for key in _FLAG_PARAMS:
        if key in raw and raw[key] is not None:
            supplied[key] = raw[key]
    if exp not in _PARAM_KEYS:
        return {}, []
    known = _PARAM_KEYS[exp]
    for key in sorted(set(supplied) - known):
        errors.append(f"params.{key}: not used by {exp}; known keys are "
                      + ", ".join(sorted(known)))

    params: dict = {}
    x0 = supplied.get("x0")
    if x0 is None:
        if model is not None:
            params["x0"] = _default_x0(model)
    else:
        if isinstance(x0, str):
            try:
                x0 = _parse_number(x0)
            except ValueError:
                errors.append("params.x0: expected a number")
                x0 = None
        if isinstance(x0, bool) or not isinstance(x0, (int, float)):
            if x0 is not None:
                errors.append("params.x0: expected a number")
        elif model is not None and not model.space.contains(x0):
            errors.append("params.x0: outside the model trait space")
        else:
            params["x0"] = x0

    def _pos_int(key, default):
        v = supplied.get(key, default)
        if v is None:
            return None
        if isinstance(v, str):
            try:
                v = int(v)
            except ValueError:
                errors.append(f"params.{key}: expected a positive integer")
                return None
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            errors.append(f"params.{key}: expected a positive integer")
            return None
        return v

    if exp in ("simulate", "check-m2o", "growth"):
        n = _pos_int("n", {"simulate": 10, "check-m2o": 3, "growth": 400}[exp])
        if n is not None:
            params["n"] = n
        if exp == "check-m2o" and n is not None and model is not None \
                and isinstance(model, FiniteModel):
            if model.space.size ** (2 * n + 1) > 5_000_000:
                errors.append("params.n: path enumeration over all indicator "
                              "functionals would exceed the budget")
        if exp == "growth":
            var = supplied.get("variational", True)
            if not isinstance(var, bool):
                errors.append("params.variational: expected a boolean")
            else:
                params["variational"] = var

    if exp in ("lln", "local-density", "extremes"):
        default = {"lln": [6, 10, 14], "local-density": [10, 20, 30, 40],
                   "extremes": [15, 30, 60]}[exp]
        try:
            ladder = _parse_ladder(supplied.get("ladder", default))
        except (TypeError, ValueError):
            errors.append("params.ladder: expected comma separated integers")
            ladder = None
        if ladder is not None:
            if not ladder or ladder[0] < 1 \
                    or any(b <= a for a, b in zip(ladder, ladder[1:])):
                errors.append("params.ladder: expected strictly increasing "
                              "positive integers")
            else:
                params["ladder"] = ladder

    if exp == "lln":
        try:
            params["f"] = _parse_f(supplied.get("f", "identity"), model)
        except (TypeError, ValueError) as ex:
            errors.append(f"params.f: {ex}")
        try:
            fn = _parse_fn(supplied.get("fn", "id"))
            atoms = getattr(getattr(model, "space", None), "atoms", None)
            if fn["kind"] == "log-over-n" and atoms is not None \
                    and any(a <= 0 for a in atoms):
                errors.append("params.fn: log-over-n needs strictly "
                              "positive trait atoms")
            else:
                params["fn"] = fn
        except (TypeError, ValueError) as ex:
            errors.append(f"params.fn: {ex}")
    if exp == "local-density":
        try:
            kind, value = _parse_schedule(supplied.get("a_n", "const:1"))
            params["a_n"] = [kind, value]
        except (TypeError, ValueError) as ex:
            errors.append(f"params.a_n: {ex}")
    if exp == "extremes":
        beam = supplied.get("beam", DEFAULT_BEAM)
        if isinstance(beam, str):
            try:
                beam = int(beam)
            except ValueError:
                beam = -1
        if not isinstance(beam, int) or isinstance(beam, bool) or beam < 0:
            errors.append("params.beam: expected a nonnegative integer "
                          "(0 disables the beam)")
        else:
            params["beam"] = beam

    if exp == "probe-mg":
        p = _pos_int("p", 1)
        if p is not None:
            params["p"] = p
        try:
            b = _parse_floats(supplied.get("b", [1.0, 1.0]))
        except (TypeError, ValueError):
            errors.append("params.b: expected comma separated levels")
            b = None
        if b is not None:
            if len(b) < 2:
                errors.append("params.b: expected at least two levels")
            else:
                params["b"] = b
        q = _pos_int("q", None)
        if q is not None:
            params["q"] = q
            horizon = _pos_int("horizon", None)
            if horizon is None:
                errors.append("params.horizon: required when q is set")
            else:
                params["horizon"] = horizon
            line = supplied.get("line")
            if line is None:
                errors.append("params.line: required when q is set")
            else:
                try:
                    params["line"] = float(line)
                except (TypeError, ValueError):
                    errors.append("params.line: expected a number")
        for key in ("target_rate", "aux_rate"):
            v = supplied.get(key)
            if v is not None:
                try:
                    params[key] = float(v)
                except (TypeError, ValueError):
                    errors.append(f"params.{key}: expected a number")
        eps = supplied.get("epsilon", 0.05)
        try:
            eps = float(eps)
        except (TypeError, ValueError):
            eps = -1.0
        if eps <= 0:
            errors.append("params.epsilon: expected a positive number")
        else:
            params["epsilon"] = eps

    return params, errors


def validate_config(raw) -> Tuple[Optional[dict], List[str]]:
    """Normalize a raw configuration, applying defaults. Never simulates.

    Returns (normalized config, errors); the config is None whenever the
    error list is nonempty.
    """
    if not isinstance(raw, dict):
        return None, ["config: expected a mapping"]
    errors: List[str] = []

    exp = raw.get("experiment")
    if exp is None:
        errors.append("experiment: required")
    elif exp not in EXPERIMENTS:
        errors.append(f"experiment: unknown experiment {exp!r}; valid names "
                      "are " + ", ".join(EXPERIMENTS))

    model_cfg, model, model_errors = _normalize_model(raw.get("model"))
    errors.extend(model_errors)
    env_cfg, env_errors = _normalize_env(raw.get("environment"), model)
    errors.extend(env_errors)

    def _nonneg_int(key, default):
        v = raw.get(key, default)
        if isinstance(v, int) and not isinstance(v, bool) and v >= 0:
            return v
        errors.append(f"{key}: expected a nonnegative integer")
        return default

    seed = _nonneg_int("seed", 0)
    replicates = raw.get("replicates", DEFAULT_REPLICATES)
    if not isinstance(replicates, int) or isinstance(replicates, bool) \
            or replicates < 1:
        errors.append("replicates: expected a positive integer")
        replicates = DEFAULT_REPLICATES
    cap = raw.get("cap", DEFAULT_CAP)
    if not isinstance(cap, int) or isinstance(cap, bool) or cap < 1:
        errors.append("cap: expected a positive integer")
        cap = DEFAULT_CAP
    out = raw.get("out", DEFAULT_OUT)
    if not isinstance(out, str) or not out:
        errors.append("out: expected a directory path")
        out = DEFAULT_OUT

    params, param_errors = _normalize_params(exp, raw, model)
    errors.extend(param_errors)

    if exp in FINITE_ONLY and model is not None \
            and not isinstance(model, FiniteModel):
        errors.append(f"experiment: {exp} needs a finite trait space model "
                      "(two-type-m2 or neutral-gw)")
    if exp == "growth" and env_cfg is not None and env_cfg["kind"] == "iid" \
            and params.get("variational", True):
        errors.append("params.variational: the variational rate needs a "
                      "constant or periodic environment "
                      "(pass variational: false)")
    if exp == "local-density" and model is not None \
            and params.get("a_n") is not None:
        kind = params["a_n"][0]
        if model.name == "kimmel" and (kind != "const"
                                       or params["a_n"][1] != 1.0):
            errors.append("params.a_n: the kimmel engine counts infected "
                          "cells, which fixes a_n to const:1")
        if model.name == "brw" and kind != "linear":
            errors.append("params.a_n: the walk engine needs a linear "
                          "schedule, e.g. linear:0.8")

    known_top = {"experiment", "model", "environment", "seed", "replicates",
                 "cap", "out", "params"} | set(_FLAG_PARAMS)
    for key in sorted(set(raw) - known_top):
        errors.append(f"{key}: not a recognized field")

    if errors:
        return None, errors
    return {
        "experiment": exp,
        "model": model_cfg,
        "environment": env_cfg,
        "seed": seed,
        "replicates": replicates,
        "cap": cap,
        "params": params,
        "out": out,
    }, []


def config_digest(norm: dict) -> str:
    """Digest of the behavioral core of a config. The output directory is
    excluded so renaming it cannot change what the records claim."""
    core = {key: norm[key] for key in ("experiment", "model", "environment",
                                       "seed", "replicates", "cap", "params")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ------------------------------------------------------------- execution

def _materialize(norm: dict):
    model = _build_model(norm["model"])
    return model, _build_env(model, norm["environment"])


def _simulate_records(norm, model, env, indices):
    prm = norm["params"]
    n = prm["n"]
    # uninfected cells are absorbing and would double the tree every
    # generation without touching any recorded quantity
    prune = (lambda t: t == 0) if model.name == "kimmel" else None
    finite = isinstance(model, FiniteModel)
    out = []
    for r in indices:
        tree_seed = int(replicate_generator(norm["seed"], r,
                                            _SIM_TAG).integers(1 << 62))
        tree = simulate(model, env, prm["x0"], n, seed=tree_seed,
                        cap=norm["cap"], prune=prune)
        for g in range(n + 1):
            traits = tree.traits_at(g)
            rec = {"replicate": r, "n": g, "total": int(traits.size)}
            if traits.size:
                rec["min_trait"] = float(np.min(traits))
                rec["max_trait"] = float(np.max(traits))
            else:
                rec["min_trait"] = None
                rec["max_trait"] = None
            if finite:
                rec["census"] = {str(a): int(np.sum(traits == a))
                                 for a in model.space.atoms
                                 if np.sum(traits == a) > 0}
            out.append(rec)
    return out


def _records_for(norm, model, env, indices):
    exp = norm["experiment"]
    prm = norm["params"]
    if exp == "simulate":
        return _simulate_records(norm, model, env, indices)
    if exp == "local-density":
        recs = density_records(model, env, prm["x0"], tuple(prm["a_n"]),
                               prm["ladder"], indices, norm["seed"],
                               norm["cap"])
        return [dataclasses.asdict(rec) for rec in recs]
    recs = extreme_records(model, env, prm["x0"], prm["ladder"], indices,
                           norm["seed"], prm["beam"] or None, norm["cap"])
    return [dataclasses.asdict(rec) for rec in recs]


def _chunk_worker(payload):
    blob, indices = payload
    norm = json.loads(blob)
    model, env = _materialize(norm)
    with warnings.catch_warnings(record=True) as wrec:
        warnings.simplefilter("always")
        recs = _records_for(norm, model, env, indices)
    return recs, [str(w.message) for w in wrec]


def _parallel_records(norm, workers):
    total = norm["replicates"]
    indices = list(range(total))
    if workers <= 1 or total <= 1:
        model, env = _materialize(norm)
        return _records_for(norm, model, env, indices), []
    size = math.ceil(total / min(workers, total))
    chunks = [indices[i:i + size] for i in range(0, total, size)]
    blob = json.dumps(norm, sort_keys=True)
    records: List[dict] = []
    warns: List[str] = []
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        for recs, wlist in pool.map(_chunk_worker,
                                    [(blob, c) for c in chunks]):
            records.extend(recs)
            warns.extend(wlist)
    return records, warns


def _m2o_worst(model, env, x0, k):
    """Worst identity gap over every indicator path functional of length k,
    plus the constant functional (total mean mass)."""
    atoms = model.space.atoms
    worst = 0.0
    tested = 0
    for w in itertools.product(atoms, repeat=k):
        target = tuple(w)

        def F(path, _t=target):
            return 1.0 if tuple(path[1:]) == _t else 0.0

        rep = many_to_one_check(model, env, x0, k, F)
        worst = max(worst, abs(rep.gap))
        tested += 1
    rep = many_to_one_check(model, env, x0, k, lambda path: 1.0)
    return max(worst, abs(rep.gap)), tested + 1


def _summary_simulate(norm, records):
    horizon = norm["params"]["n"]
    finals = [r for r in records if r["n"] == horizon]
    totals = [r["total"] for r in finals]
    alive = sum(1 for t in totals if t > 0)
    return [("replicates", norm["replicates"]), ("horizon", horizon),
            ("survival_fraction", alive / len(finals)),
            ("mean_final_total", float(np.mean(totals)))]


def _summary_density(norm, model, env, records, warn_list):
    prm = norm["params"]
    recs = [DensityRecord(**{k: rec[k] for k in
                             ("replicate", "n", "count", "log_count_over_n",
                              "markov_bound", "survived")})
            for rec in records]
    report = summarize_density(model, env, prm["x0"], tuple(prm["a_n"]),
                               recs, prm["ladder"], norm["seed"])
    warn_list.extend(report.notes)
    return [("ladder", " ".join(str(k) for k in report.ladder)),
            ("slope", report.slope), ("slope_se", report.slope_se),
            ("slopes_used", report.slopes_used),
            ("alpha", report.alpha), ("total_rate", report.total_rate),
            ("markov_violation_fraction",
             report.markov_violation_fraction()),
            ("decomposition_gap", report.decomposition_gap())]


def _summary_extremes(norm, model, records, warn_list):
    prm = norm["params"]
    recs = [ExtremeRecord(**{k: rec[k] for k in
                             ("replicate", "n", "max_trait", "max_over_n")})
            for rec in records]
    beam = (prm["beam"] or None) if model.name == "brw" else None
    report = ExtremesReport(tuple(prm["ladder"]), recs,
                            predicted_speed(model), beam)
    rows = [("ladder", " ".join(str(k) for k in report.ladder)),
            ("median_speed", report.median_speed),
            ("predicted_speed", report.predicted),
            ("beam", report.beam)]
    if report.predicted is not None:
        rows.append(("exceed_fraction", report.exceed_fraction()))
    if beam is not None:
        warn_list.append("walk maxima run under a beam and can only "
                         "underestimate the front")
    return rows


def _single_process(norm, model, env, warn_list):
    exp = norm["experiment"]
    prm = norm["params"]
    if exp == "check-m2o":
        records = []
        worst_all = 0.0
        for k in range(1, prm["n"] + 1):
            worst, tested = _m2o_worst(model, env, prm["x0"], k)
            records.append({"replicate": 0, "n": k, "functionals": tested,
                            "worst_gap": worst})
            worst_all = max(worst_all, worst)
        return records, [("max_path_length", prm["n"]),
                         ("worst_gap", worst_all)]

    if exp == "growth":
        report = growth_report(model, env, prm["x0"], n_max=prm["n"],
                               variational=prm["variational"])
        records = [{"replicate": 0, "quantity": "rho_slope",
                    "value": report.rho_slope}]
        if report.rho_eig is not None:
            records.append({"replicate": 0, "quantity": "rho_eig",
                            "value": report.rho_eig})
        if report.rho_var is not None:
            records.append({"replicate": 0, "quantity": "rho_var",
                            "value": report.rho_var})
        if prm["variational"] and report.maximizer is not None:
            ev = RateFunctionEvaluator(model, env)
            for (atom, phase), wgt in zip(ev.atoms, report.maximizer):
                records.append({"replicate": 0, "quantity": "maximizer",
                                "atom": str(atom), "phase": phase,
                                "value": float(wgt)})
        rows = [("horizon", prm["n"]), ("rho_slope", report.rho_slope),
                ("rho_eig", report.rho_eig), ("rho_var", report.rho_var)]
        for key in ("slope_minus_eig", "var_minus_eig"):
            if key in report.diagnostics:
                rows.append((key, report.diagnostics[key]))
        return records, rows

    if exp == "lln":
        report = lln_experiment(model, env, prm["x0"], _f_callable(prm["f"]),
                                _fn_callable(prm["fn"], prm["ladder"][-1]),
                                prm["ladder"], norm["replicates"],
                                norm["seed"])
        records = [dataclasses.asdict(rec) for rec in report.records]
        rows = [("replicates", norm["replicates"]),
                ("t_fraction", report.t_fraction),
                ("strong_max_median", report.strong_max_median)]
        for k in report.ladder:
            rows.append((f"mean_square_n{k}", report.mean_square[k]))
            rows.append((f"prop_gap_median_n{k}", report.prop_gap_median[k]))
            rows.append((f"mu_n{k}", report.mu_values[k]))
        return records, rows

    # probe-mg
    curve = (prm["p"], prm["b"])
    if "q" in prm:
        curve = (curve, (prm["q"], prm["line"]))
    report = assumption_mg_probe(model, env, curve,
                                 horizon=prm.get("horizon"),
                                 target_rate=prm.get("target_rate"),
                                 epsilon=prm["epsilon"],
                                 aux_rate=prm.get("aux_rate"),
                                 x0=prm.get("x0"))
    warn_list.extend(report.notes)
    records = [{"replicate": 0, "n": i, "quantity": "block_mass",
                "value": float(mass)}
               for i, mass in enumerate(report.prefix_masses)]
    rows = [("block", report.block),
            ("prefix_certified", report.prefix_certified),
            ("q", report.q), ("horizon", report.horizon),
            ("average", report.average),
            ("target_rate", report.target_rate),
            ("epsilon", report.epsilon), ("certified", report.certified),
            ("aux_average", report.aux_average),
            ("aux_rate", report.aux_rate),
            ("aux_certified", report.aux_certified)]
    return records, rows


def execute(norm: dict, workers: int = 1):
    """Run the configured experiment. Returns (records, summary, warnings);
    records are plain dicts, not yet stamped with seed and digest."""
    warn_list: List[str] = []
    with warnings.catch_warnings(record=True) as wrec:
        warnings.simplefilter("always")
        if norm["experiment"] in PARALLEL:
            records, child_warns = _parallel_records(norm, workers)
            warn_list.extend(child_warns)
            model, env = _materialize(norm)
            if norm["experiment"] == "simulate":
                summary = _summary_simulate(norm, records)
            elif norm["experiment"] == "local-density":
                summary = _summary_density(norm, model, env, records,
                                           warn_list)
            else:
                summary = _summary_extremes(norm, model, records, warn_list)
        else:
            model, env = _materialize(norm)
            records, summary = _single_process(norm, model, env, warn_list)
    warn_list.extend(str(w.message) for w in wrec)
    return records, summary, list(dict.fromkeys(warn_list))


# ---------------------------------------------------------------- output

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.bool_):
        return bool(value)
    if value is None or isinstance(value, (bool, int, str)):
        return value
    return str(value)


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(
        timespec="seconds")


def _write_outputs(norm, digest, records, summary, warns, started, workers):
    outdir = Path(norm["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "records.ndjson", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":"),
                                allow_nan=False))
            fh.write("\n")
    with open(outdir / "summary.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerow(["experiment", norm["experiment"]])
        writer.writerow(["config_digest", digest])
        writer.writerow(["seed", norm["seed"]])
        for key, value in summary:
            writer.writerow([key, "" if value is None else _jsonable(value)])
    manifest = {
        "config": {key: norm[key] for key in
                   ("experiment", "model", "environment", "seed",
                    "replicates", "cap", "params")},
        "config_digest": digest,
        "experiment": norm["experiment"],
        "seed": norm["seed"],
        "version": _version(),
        "started_at": started,
        "finished_at": _utcnow(),
        "records": len(records),
        "summary_rows": len(summary) + 3,
        "workers": workers,
        "warnings": warns,
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outdir


def _version() -> str:
    from . import __version__
    return __version__


def _error_record(kind: str, messages: List[str]) -> None:
    sys.stderr.write(json.dumps({"error": kind, "messages": messages},
                                sort_keys=True) + "\n")


# ------------------------------------------------------------------ main

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int,
                        help="worker processes (BRANCHKIT_WORKERS fallback)")
    common.add_argument("--cap", type=int,
                        help="per-generation population cap")
    common.add_argument("--replicates", type=int)
    common.add_argument("--model", choices=MODEL_NAMES)
    common.add_argument("--x0", help="starting trait")
    common.add_argument("--env",
                        help="constant[:i] | periodic:i,j,.. | iid:i,j:<seed>")
    common.add_argument("--lambda", dest="lam", type=float,
                        help="infection rate of the kimmel model")
    common.add_argument("--offspring", help="'binary' or a brood size")
    common.add_argument("--increment",
                        help="normal:<mu>,<sd> | rademacher | drift:<step>")
    common.add_argument("--n", type=int, help="horizon or path length")
    common.add_argument("--ladder", help="comma separated horizons")
    common.add_argument("--f", help="identity | indicator:<atom>")
    common.add_argument("--fn", help="id | affine:a,b | log-over-n")
    common.add_argument("--a-n", dest="a_n",
                        help="const:<level> | linear:<slope>")
    common.add_argument("--beam", type=int,
                        help="walk beam width, 0 disables")
    common.add_argument("--no-variational", action="store_true",
                        help="skip the variational rate")
    common.add_argument("--p", type=int, help="prefix block length")
    common.add_argument("--b", help="comma separated prefix levels")
    common.add_argument("--q", type=int, help="horizon block length")
    common.add_argument("--line", type=float,
                        help="constant level for the horizon blocks")
    common.add_argument("--horizon", type=int)
    common.add_argument("--target-rate", dest="target_rate", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--aux-rate", dest="aux_rate", type=float)

    parser = argparse.ArgumentParser(
        prog="branchkit",
        description="Branching Markov chain experiments with exact "
                    "auxiliary-chain checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    val = sub.add_parser("validate", parents=[common])
    val.add_argument("--experiment", choices=EXPERIMENTS)
    return parser


def _merge_config(args) -> dict:
    raw: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError("config: expected a mapping at the top level")
        raw.update(loaded)
    if args.command != "validate":
        raw["experiment"] = args.command
    elif getattr(args, "experiment", None):
        raw["experiment"] = args.experiment

    model_over = {}
    if args.model is not None:
        model_over["name"] = args.model
    if args.lam is not None:
        model_over["lambda"] = args.lam
    if args.offspring is not None:
        off = args.offspring
        model_over["offspring"] = int(off) if off.lstrip("-").isdigit() \
            else off
    if args.increment is not None:
        model_over["increment"] = args.increment
    if model_over:
        base = raw.get("model")
        if isinstance(base, str):
            base = {"name": base}
        if not isinstance(base, dict):
            base = {}
        base = dict(base)
        base.update(model_over)
        raw["model"] = base

    if args.env is not None:
        raw["environment"] = args.env
    for key in ("seed", "out", "cap", "replicates", "n", "ladder", "f",
                "fn", "a_n", "beam", "p", "b", "q", "line", "horizon",
                "target_rate", "epsilon", "aux_rate"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if args.x0 is not None:
        raw["x0"] = _parse_number(args.x0)
    if args.no_variational:
        raw["variational"] = False
    return raw


def _resolve_workers(args, errors: List[str]) -> int:
    if args.workers is not None:
        if args.workers < 1:
            errors.append("workers: expected a positive integer")
            return 1
        return args.workers
    env_value = os.environ.get("BRANCHKIT_WORKERS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            errors.append("workers: BRANCHKIT_WORKERS must be an integer")
    return 1


def run(raw: dict, workers: int = 1) -> Path:
    """Library entry point mirroring the command line: validate, execute,
    write records.ndjson, summary.csv and manifest.json. Returns the output
    directory. Raises ConfigError on an invalid configuration."""
    from .errors import ConfigError

    norm, errors = validate_config(raw)
    if errors:
        raise ConfigError(errors)
    started = _utcnow()
    records, summary, warns = execute(norm, workers)
    digest = config_digest(norm)
    records = [dict(rec, seed=norm["seed"], config_digest=digest)
               for rec in records]
    if norm["experiment"] in PARALLEL:
        records.sort(key=lambda rec: (rec["replicate"], rec["n"]))
    records = [_jsonable(rec) for rec in records]
    return _write_outputs(norm, digest, records, summary, warns, started,
                          workers)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        raw = _merge_config(args)
    except (OSError, ValueError, yaml.YAMLError) as ex:
        _error_record("ConfigError", [f"config: {ex}"])
        return 2

    errors: List[str] = []
    workers = _resolve_workers(args, errors)
    norm, cfg_errors = validate_config(raw)
    errors.extend(cfg_errors)

    if args.command == "validate":
        if errors:
            print(json.dumps({"errors": errors}, indent=2, sort_keys=True))
            return 2
        shown = dict(norm)
        shown["config_digest"] = config_digest(norm)
        print(json.dumps(shown, indent=2, sort_keys=True))
        return 0

    if errors:
        _error_record("ConfigError", errors)
        return 2
    started = _utcnow()
    try:
        records, summary, warns = execute(norm, workers)
    except BranchkitError as ex:
        _error_record(type(ex).__name__, [str(ex)])
        return 1
    digest = config_digest(norm)
    records = [dict(rec, seed=norm["seed"], config_digest=digest)
               for rec in records]
    if norm["experiment"] in PARALLEL:
        records.sort(key=lambda rec: (rec["replicate"], rec["n"]))
    records = [_jsonable(rec) for rec in records]
    outdir = _write_outputs(norm, digest, records, summary, warns, started,
                            workers)
    print(f"wrote {len(records)} records to {outdir / 'records.ndjson'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
