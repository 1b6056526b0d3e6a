"""Command-line front door.

One declarative YAML config per run, two subcommands:

    panel-dml estimate <config.yaml>   # fit estimands on a panel CSV
    panel-dml simulate <config.yaml>   # Monte Carlo study over a DGP grid

`--set path=value` patches the config in place (dotted keys, YAML-parsed
values); `--seed`, `--threads`, `--output-dir` override the matching fields.
All outputs land in the output directory via write-to-temp + atomic rename, so
a failed run never leaves partial files. Exit codes: 0 success, 2 config or
validation error, 3 data error, 4 numeric failure. Errors are reported as a
JSON object on stdout; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np
import yaml

from .data import ColumnSchema, load_panel, split_folds
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    LagError,
    NumericError,
    PanelDMLError,
)
from .estimator import (
    aggregate_over_lags,
    aggregate_over_periods,
    debiased_theta,
    plugin_theta,
)
from .features import (
    FullPolyGen,
    InteractionGen,
    InterceptGen,
    PowerGen,
    VarSelector,
)
from .presets import PRESETS, build_specs, is_debiased
from .simulation import DgpSpec, EstimandSpec, run_monte_carlo
from .solver import PenaltySpec

_log = logging.getLogger(__name__)

OUTPUT_ENCODING = "utf-8"


# ---------------------------------------------------------------------------
# config model


@dataclass(frozen=True)
class DataConfig:
    path: str
    unit: str = "unit"
    period: str = "period"
    outcome: str = "y"
    treatment: str = "d"
    covariates: tuple | None = None
    instruments: tuple | None = None
    invariants: tuple | None = None

    def schema(self) -> ColumnSchema:
        return ColumnSchema(
            unit=self.unit, period=self.period, outcome=self.outcome,
            treatment=self.treatment, covariates=self.covariates,
            instruments=self.instruments, invariants=self.invariants,
        )


@dataclass(frozen=True)
class DgpGridConfig:
    variant: str = "dgp1"
    n_units: tuple = (1000,)
    n_periods: int = 10
    n_covariates: tuple = (5,)


@dataclass(frozen=True)
class DictionaryBlocks:
    """Explicit term-generator blocks; any slot left None falls back to the
    panel-shaped defaults."""

    v: tuple | None = None
    z: tuple | None = None
    b: tuple | None = None
    d: tuple | None = None


@dataclass(frozen=True)
class EstimatorConfig:
    presets: tuple = ("DPGMM",)
    folds: int = 5
    ci_level: float = 0.95
    penalty: PenaltySpec | None = None
    riesz_penalty: PenaltySpec | None = None
    dictionaries: DictionaryBlocks | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: str
    seed: int = 0
    threads: int | None = None
    model: str = "static"
    q: int = 1
    p: int = 0
    estimands: tuple = ()
    estimator: EstimatorConfig = EstimatorConfig()
    data: DataConfig | None = None
    dgp: DgpGridConfig | None = None
    replications: int | None = None
    output_dir: str = "."


# ---------------------------------------------------------------------------
# parsing (raw mapping -> RunConfig) and canonical serialization


def _ctx(path, message):
    return ConfigError(f"{path}: {message}")


def _as_mapping(obj, path):
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise _ctx(path, f"expected a mapping, got {type(obj).__name__}")
    return obj


def _as_int(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise _ctx(path, f"expected an integer, got {obj!r}")
    return int(obj)


def _as_number(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise _ctx(path, f"expected a number, got {obj!r}")
    return float(obj)


def _as_str(obj, path):
    if not isinstance(obj, str):
        raise _ctx(path, f"expected a string, got {obj!r}")
    return obj


def _as_list(obj, path):
    if not isinstance(obj, (list, tuple)):
        raise _ctx(path, f"expected a list, got {obj!r}")
    return list(obj)


def _check_keys(obj, allowed, path):
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise _ctx(path, f"unknown keys {unknown}; allowed: {sorted(allowed)}")


def _opt_str_list(obj, path):
    if obj is None:
        return None
    return tuple(_as_str(v, f"{path}[{i}]") for i, v in enumerate(_as_list(obj, path)))


def _parse_penalty(obj, path) -> PenaltySpec | None:
    if obj is None:
        return None   # fall through to the preset default
    if isinstance(obj, str):
        if obj not in ("cv", "rate"):
            raise _ctx(path, f"shorthand must be 'cv', 'rate' or a number, got {obj!r}")
        return PenaltySpec(kind=obj)
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return PenaltySpec(kind="fixed", value=float(obj))
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("kind", "value", "grid_size", "grid_min_ratio", "cv_folds"), path)
    kwargs = {}
    if "kind" in obj:
        kwargs["kind"] = _as_str(obj["kind"], f"{path}.kind")
    if obj.get("value") is not None:
        kwargs["value"] = _as_number(obj["value"], f"{path}.value")
    if "grid_size" in obj:
        kwargs["grid_size"] = _as_int(obj["grid_size"], f"{path}.grid_size")
    if "grid_min_ratio" in obj:
        kwargs["grid_min_ratio"] = _as_number(obj["grid_min_ratio"], f"{path}.grid_min_ratio")
    if "cv_folds" in obj:
        kwargs["cv_folds"] = _as_int(obj["cv_folds"], f"{path}.cv_folds")
    try:
        return PenaltySpec(**kwargs)
    except ConfigError as exc:
        raise _ctx(path, str(exc)) from exc


def _penalty_dict(spec: PenaltySpec | None) -> dict | None:
    if spec is None:
        return None
    return {
        "kind": spec.kind, "value": spec.value, "grid_size": spec.grid_size,
        "grid_min_ratio": spec.grid_min_ratio, "cv_folds": spec.cv_folds,
    }


def _parse_selector(obj, path) -> VarSelector:
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("role", "lag", "component"), path)
    if "role" not in obj:
        raise _ctx(path, "selector needs a role")
    role = _as_str(obj["role"], f"{path}.role")
    lag = _as_int(obj.get("lag", 0), f"{path}.lag")
    component = obj.get("component")
    if component is not None:
        component = _as_int(component, f"{path}.component")
    return VarSelector(role=role, lag=lag, component=component)


def _selector_dict(sel: VarSelector) -> dict:
    return {"role": sel.role, "lag": sel.lag, "component": sel.component}


def _parse_generator(obj, path):
    obj = _as_mapping(obj, path)
    kind = _as_str(obj.get("kind", ""), f"{path}.kind")
    if kind == "powers":
        _check_keys(obj, ("kind", "vars", "powers"), path)
        sels = tuple(_parse_selector(v, f"{path}.vars[{i}]")
                     for i, v in enumerate(_as_list(obj.get("vars"), f"{path}.vars")))
        powers = tuple(_as_int(p, f"{path}.powers[{i}]")
                       for i, p in enumerate(_as_list(obj.get("powers"), f"{path}.powers")))
        return PowerGen(vars=sels, powers=powers)
    if kind == "interactions":
        _check_keys(obj, ("kind", "left", "right", "left_powers", "right_powers"), path)
        left = tuple(_parse_selector(v, f"{path}.left[{i}]")
                     for i, v in enumerate(_as_list(obj.get("left"), f"{path}.left")))
        right = tuple(_parse_selector(v, f"{path}.right[{i}]")
                      for i, v in enumerate(_as_list(obj.get("right"), f"{path}.right")))
        lp = tuple(_as_int(p, f"{path}.left_powers[{i}]")
                   for i, p in enumerate(_as_list(obj.get("left_powers", [1]), f"{path}.left_powers")))
        rp = tuple(_as_int(p, f"{path}.right_powers[{i}]")
                   for i, p in enumerate(_as_list(obj.get("right_powers", [1]), f"{path}.right_powers")))
        return InteractionGen(left=left, right=right, left_powers=lp, right_powers=rp)
    if kind == "full_poly":
        _check_keys(obj, ("kind", "vars", "max_degree"), path)
        sels = tuple(_parse_selector(v, f"{path}.vars[{i}]")
                     for i, v in enumerate(_as_list(obj.get("vars"), f"{path}.vars")))
        return FullPolyGen(vars=sels, max_degree=_as_int(obj.get("max_degree"), f"{path}.max_degree"))
    if kind == "intercept":
        _check_keys(obj, ("kind",), path)
        return InterceptGen()
    raise _ctx(path, f"unknown generator kind {kind!r}; "
                     "expected powers | interactions | full_poly | intercept")


def _generator_dict(gen) -> dict:
    if isinstance(gen, PowerGen):
        return {"kind": "powers", "vars": [_selector_dict(v) for v in gen.vars],
                "powers": list(gen.powers)}
    if isinstance(gen, InteractionGen):
        return {"kind": "interactions",
                "left": [_selector_dict(v) for v in gen.left],
                "right": [_selector_dict(v) for v in gen.right],
                "left_powers": list(gen.left_powers),
                "right_powers": list(gen.right_powers)}
    if isinstance(gen, FullPolyGen):
        return {"kind": "full_poly", "vars": [_selector_dict(v) for v in gen.vars],
                "max_degree": gen.max_degree}
    if isinstance(gen, InterceptGen):
        return {"kind": "intercept"}
    raise ConfigError(f"cannot serialize generator {gen!r}")


def _parse_dictionaries(obj, path) -> DictionaryBlocks | None:
    if obj is None:
        return None
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("v", "z", "b", "d"), path)
    slots = {}
    for name in ("v", "z", "b", "d"):
        block = obj.get(name)
        if block is None:
            slots[name] = None
        else:
            slots[name] = tuple(
                _parse_generator(g, f"{path}.{name}[{i}]")
                for i, g in enumerate(_as_list(block, f"{path}.{name}"))
            )
    return DictionaryBlocks(**slots)


def _dictionaries_dict(blocks: DictionaryBlocks | None):
    if blocks is None:
        return None
    return {
        name: (None if getattr(blocks, name) is None
               else [_generator_dict(g) for g in getattr(blocks, name)])
        for name in ("v", "z", "b", "d")
    }


def _parse_estimand(obj, path) -> EstimandSpec:
    obj = _as_mapping(obj, path)
    kind = obj.get("kind")
    if kind is None:
        agg = obj.get("aggregate")
        if agg is None:
            kind = "point"
        elif agg == "lags":
            kind = "lag_aggregate"
        elif agg == "periods":
            kind = "period_aggregate"
        else:
            raise _ctx(path, f"aggregate must be 'lags' or 'periods', got {agg!r}")
    _check_keys(obj, ("kind", "aggregate", "t", "s", "weights", "t_values"), path)
    kwargs = {"kind": kind}
    if obj.get("t") is not None:
        kwargs["t"] = _as_int(obj["t"], f"{path}.t")
    if obj.get("s") is not None:
        kwargs["s"] = _as_int(obj["s"], f"{path}.s")
    if obj.get("weights") is not None:
        kwargs["weights"] = tuple(
            _as_number(w, f"{path}.weights[{i}]")
            for i, w in enumerate(_as_list(obj["weights"], f"{path}.weights"))
        )
    if obj.get("t_values") is not None:
        kwargs["t_values"] = tuple(
            _as_int(t, f"{path}.t_values[{i}]")
            for i, t in enumerate(_as_list(obj["t_values"], f"{path}.t_values"))
        )
    try:
        return EstimandSpec(**kwargs)
    except ConfigError as exc:
        raise _ctx(path, str(exc)) from exc


def _estimand_dict(spec: EstimandSpec) -> dict:
    out = {"kind": spec.kind}
    if spec.t is not None:
        out["t"] = spec.t
    if spec.s is not None:
        out["s"] = spec.s
    if spec.weights is not None:
        out["weights"] = list(spec.weights)
    if spec.t_values is not None:
        out["t_values"] = list(spec.t_values)
    return out


def _parse_estimator(obj, path) -> EstimatorConfig:
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("preset", "folds", "ci_level", "penalty", "riesz_penalty",
                      "dictionaries"), path)
    preset = obj.get("preset", "DPGMM")
    if isinstance(preset, str):
        presets = (preset,)
    else:
        presets = tuple(_as_str(pz, f"{path}.preset[{i}]")
                        for i, pz in enumerate(_as_list(preset, f"{path}.preset")))
    if not presets:
        raise _ctx(f"{path}.preset", "need at least one preset")
    for pz in presets:
        if pz not in PRESETS:
            raise _ctx(f"{path}.preset", f"unknown preset {pz!r}; expected one of {PRESETS}")
    ci_level = _as_number(obj.get("ci_level", 0.95), f"{path}.ci_level")
    if not 0.0 < ci_level < 1.0:
        raise _ctx(f"{path}.ci_level", f"must be in (0, 1), got {ci_level}")
    return EstimatorConfig(
        presets=presets,
        folds=_as_int(obj.get("folds", 5), f"{path}.folds"),
        ci_level=ci_level,
        penalty=_parse_penalty(obj.get("penalty"), f"{path}.penalty"),
        riesz_penalty=_parse_penalty(obj.get("riesz_penalty"), f"{path}.riesz_penalty"),
        dictionaries=_parse_dictionaries(obj.get("dictionaries"), f"{path}.dictionaries"),
    )


def _parse_data(obj, path) -> DataConfig:
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("path", "unit", "period", "outcome", "treatment",
                      "covariates", "instruments", "invariants"), path)
    if not obj.get("path"):
        raise _ctx(f"{path}.path", "estimate mode needs an input file path")
    return DataConfig(
        path=_as_str(obj["path"], f"{path}.path"),
        unit=_as_str(obj.get("unit", "unit"), f"{path}.unit"),
        period=_as_str(obj.get("period", "period"), f"{path}.period"),
        outcome=_as_str(obj.get("outcome", "y"), f"{path}.outcome"),
        treatment=_as_str(obj.get("treatment", "d"), f"{path}.treatment"),
        covariates=_opt_str_list(obj.get("covariates"), f"{path}.covariates"),
        instruments=_opt_str_list(obj.get("instruments"), f"{path}.instruments"),
        invariants=_opt_str_list(obj.get("invariants"), f"{path}.invariants"),
    )


def _data_dict(cfg: DataConfig) -> dict:
    return {
        "path": cfg.path, "unit": cfg.unit, "period": cfg.period,
        "outcome": cfg.outcome, "treatment": cfg.treatment,
        "covariates": None if cfg.covariates is None else list(cfg.covariates),
        "instruments": None if cfg.instruments is None else list(cfg.instruments),
        "invariants": None if cfg.invariants is None else list(cfg.invariants),
    }


def _parse_dgp(obj, path) -> DgpGridConfig:
    obj = _as_mapping(obj, path)
    _check_keys(obj, ("variant", "n_units", "n_periods", "n_covariates"), path)

    def int_axis(value, default, axis_path):
        if value is None:
            return (default,)
        if isinstance(value, (list, tuple)):
            vals = tuple(_as_int(v, f"{axis_path}[{i}]") for i, v in enumerate(value))
            if not vals:
                raise _ctx(axis_path, "grid axis cannot be empty")
            return vals
        return (_as_int(value, axis_path),)

    return DgpGridConfig(
        variant=_as_str(obj.get("variant", "dgp1"), f"{path}.variant"),
        n_units=int_axis(obj.get("n_units"), 1000, f"{path}.n_units"),
        n_periods=_as_int(obj.get("n_periods", 10), f"{path}.n_periods"),
        n_covariates=int_axis(obj.get("n_covariates"), 5, f"{path}.n_covariates"),
    )


def _dgp_dict(cfg: DgpGridConfig) -> dict:
    return {
        "variant": cfg.variant, "n_units": list(cfg.n_units),
        "n_periods": cfg.n_periods, "n_covariates": list(cfg.n_covariates),
    }


TOP_KEYS = ("mode", "seed", "threads", "model", "lags", "estimands",
            "estimator", "data", "dgp", "replications", "output")


def parse_config(raw: dict, mode: str) -> RunConfig:
    """Validate and canonicalize a raw config mapping for the given mode."""
    raw = _as_mapping(raw, "config")
    _check_keys(raw, TOP_KEYS, "config")
    stated = raw.get("mode")
    if stated is not None and stated != mode:
        raise _ctx("config.mode", f"config says {stated!r} but the subcommand is {mode!r}")

    lags = _as_mapping(raw.get("lags"), "config.lags")
    _check_keys(lags, ("q", "p"), "config.lags")
    q = _as_int(lags.get("q", 1), "config.lags.q")
    p = _as_int(lags.get("p", 0), "config.lags.p")
    model = _as_str(raw.get("model", "static"), "config.model")
    if model not in ("static", "dynamic"):
        raise _ctx("config.model", f"expected 'static' or 'dynamic', got {model!r}")
    if q < 0 or p < 0:
        raise _ctx("config.lags", "lag orders must be nonnegative")

    estimand_items = _as_list(raw.get("estimands"), "config.estimands")
    if not estimand_items:
        raise _ctx("config.estimands", "need at least one estimand")
    estimands = tuple(_parse_estimand(e, f"config.estimands[{i}]")
                      for i, e in enumerate(estimand_items))

    estimator = _parse_estimator(raw.get("estimator"), "config.estimator")
    threads = raw.get("threads")
    if threads is not None:
        threads = _as_int(threads, "config.threads")
        if threads < 1:
            raise _ctx("config.threads", "must be positive")
    output = _as_mapping(raw.get("output"), "config.output")
    _check_keys(output, ("dir",), "config.output")

    cfg = RunConfig(
        mode=mode,
        seed=_as_int(raw.get("seed", 0), "config.seed"),
        threads=threads,
        model=model, q=q, p=p,
        estimands=estimands,
        estimator=estimator,
        output_dir=_as_str(output.get("dir", "."), "config.output.dir"),
    )

    if mode == "estimate":
        if "dgp" in raw or "replications" in raw:
            raise _ctx("config", "estimate mode does not take dgp/replications")
        if len(estimator.presets) != 1:
            raise _ctx("config.estimator.preset", "estimate mode takes exactly one preset")
        if "data" not in raw:
            raise _ctx("config.data", "estimate mode needs a data section")
        return _replace(cfg, data=_parse_data(raw.get("data"), "config.data"))

    if "data" in raw:
        raise _ctx("config.data", "simulate mode does not read a data file")
    if raw.get("replications") is None:
        raise _ctx("config.replications", "simulate mode needs a replication count")
    replications = _as_int(raw["replications"], "config.replications")
    if replications < 1:
        raise _ctx("config.replications", "need at least one replication")
    dgp = _parse_dgp(raw.get("dgp"), "config.dgp")
    try:
        for n in dgp.n_units:
            for n_cov in dgp.n_covariates:
                DgpSpec(dgp.variant, n, dgp.n_periods, n_cov)
    except ConfigError as exc:
        raise _ctx("config.dgp", str(exc)) from exc
    return _replace(cfg, dgp=dgp, replications=replications)


def _replace(cfg, **kwargs):
    from dataclasses import replace
    return replace(cfg, **kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical mapping: parse_config(config_to_dict(cfg), cfg.mode) == cfg."""
    out = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "model": cfg.model,
        "lags": {"q": cfg.q, "p": cfg.p},
        "estimands": [_estimand_dict(e) for e in cfg.estimands],
        "estimator": {
            "preset": list(cfg.estimator.presets),
            "folds": cfg.estimator.folds,
            "ci_level": cfg.estimator.ci_level,
            "penalty": _penalty_dict(cfg.estimator.penalty),
            "riesz_penalty": _penalty_dict(cfg.estimator.riesz_penalty),
            "dictionaries": _dictionaries_dict(cfg.estimator.dictionaries),
        },
        "output": {"dir": cfg.output_dir},
    }
    if cfg.mode == "estimate":
        out["data"] = _data_dict(cfg.data)
    else:
        out["dgp"] = _dgp_dict(cfg.dgp)
        out["replications"] = cfg.replications
    return out


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply --set path=value patches (dotted keys, YAML-parsed values)."""
    raw = copy.deepcopy(raw)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        path, _, text = item.partition("=")
        keys = [kk for kk in path.strip().split(".") if kk]
        if not keys:
            raise ConfigError(f"--set has an empty path in {item!r}")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set value for {path!r} is not valid YAML: {exc}") from exc
        node = raw
        for kk in keys[:-1]:
            nxt = node.get(kk)
            if nxt is None:
                nxt = {}
                node[kk] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set path {path!r} crosses a non-mapping at {kk!r}")
            node = nxt
        node[keys[-1]] = value
    return raw


def load_config(path: str, mode: str, assignments=(), seed=None, threads=None,
                output_dir=None) -> RunConfig:
    try:
        with open(path, "r", encoding=OUTPUT_ENCODING) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    raw = apply_overrides(raw, assignments)
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    if output_dir is not None:
        raw.setdefault("output", {})
        raw["output"]["dir"] = output_dir
    return parse_config(raw, mode)


# ---------------------------------------------------------------------------
# default dictionaries for data-driven runs


def default_dictionaries(panel, t: int, s: int, q: int, p: int, model: str,
                         blocks: DictionaryBlocks | None):
    """Panel-shaped default term generators, overridable slot by slot.

    Cubic polynomials in the treatment lags, quadratics in current-period
    covariates with first-order treatment interactions, linear terms for
    instruments, invariants and (dynamic model) lagged outcomes; the
    conditioning-side blocks sit at lags s+1 and, history permitting, s+2.
    """
    t_sel = lambda lag: VarSelector("treatment", lag)
    x_sel = lambda lag: VarSelector("covariate", lag, None)

    def value_side(treat_lags, cov_lags, outcome_lags):
        gens = [PowerGen(vars=tuple(t_sel(l) for l in treat_lags), powers=(1, 2, 3))]
        if panel.n_covariates:
            gens.append(PowerGen(vars=tuple(x_sel(l) for l in cov_lags), powers=(1, 2)))
            gens.extend(
                InteractionGen(left=(t_sel(l),), right=(x_sel(l),),
                               left_powers=(1,), right_powers=(1,))
                for l in treat_lags if l in cov_lags
            )
        if panel.n_invariant:
            gens.append(PowerGen(vars=(VarSelector("invariant", 0, None),), powers=(1,)))
        if model == "dynamic" and outcome_lags:
            gens.append(PowerGen(
                vars=tuple(VarSelector("outcome_lag", l) for l in outcome_lags),
                powers=(1,),
            ))
        return tuple(gens)

    v_default = value_side(range(q + 1), range(q + 1),
                           range(1, p + 2) if model == "dynamic" else ())

    cond_lags = [s + 1]
    if t - s - 2 >= 1:
        cond_lags.append(s + 2)
    z_gens = [PowerGen(vars=tuple(t_sel(l) for l in cond_lags), powers=(1, 2, 3))]
    if panel.n_covariates:
        z_gens.append(PowerGen(vars=tuple(x_sel(l) for l in cond_lags), powers=(1, 2)))
        z_gens.extend(
            InteractionGen(left=(t_sel(l),), right=(x_sel(l),),
                           left_powers=(1,), right_powers=(1,))
            for l in cond_lags
        )
    if panel.n_instruments:
        z_gens.append(PowerGen(
            vars=tuple(VarSelector("instrument", l, None) for l in cond_lags),
            powers=(1, 2),
        ))
    if panel.n_invariant:
        z_gens.append(PowerGen(vars=(VarSelector("invariant", 0, None),), powers=(1,)))
    if model == "dynamic" and t - s - 2 >= 1:
        z_gens.append(PowerGen(vars=(VarSelector("outcome_lag", s + 2, None),), powers=(1,)))
    z_default = tuple(z_gens)

    d_vars = [t_sel(l) for l in range(q + 1)]
    if panel.n_covariates:
        d_vars.append(x_sel(0))
    d_gens = [FullPolyGen(vars=tuple(d_vars), max_degree=3)]
    if panel.n_invariant:
        d_gens.append(PowerGen(vars=(VarSelector("invariant", 0, None),), powers=(1,)))
    if model == "dynamic":
        d_gens.append(PowerGen(
            vars=tuple(VarSelector("outcome_lag", l, None) for l in range(1, p + 2)),
            powers=(1,),
        ))
    d_default = tuple(d_gens)

    blocks = blocks or DictionaryBlocks()
    v = blocks.v if blocks.v is not None else v_default
    z = blocks.z if blocks.z is not None else z_default
    b = blocks.b if blocks.b is not None else (InterceptGen(),) + z_default
    d = blocks.d if blocks.d is not None else d_default
    return v, z, b, d


# ---------------------------------------------------------------------------
# feasibility


def check_estimand_feasibility(estimand: EstimandSpec, n_periods: int, q: int,
                               p: int, model: str):
    """Every (t, s) pair must leave enough history for the s-lag difference,
    the V lags at the differenced base period, and a nonempty conditioning
    set. Raised before any fitting starts, naming the offending estimand."""
    def check_point(t, s):
        problems = []
        if not 1 <= t <= n_periods:
            problems.append(f"period t={t} outside 1..{n_periods}")
        else:
            base = t - s - 1
            if base < 1:
                problems.append(f"difference base t-s-1 = {base} < 1")
            else:
                deepest = max(q, p + 1 if model == "dynamic" else 0)
                if base - deepest < 1:
                    problems.append(
                        f"V at base period {base} reaches back to period "
                        f"{base - deepest} < 1 (q={q}, p={p})"
                    )
                if t - s - 2 < 0:
                    problems.append("conditioning history is empty")
        if problems:
            raise LagError(f"estimand {estimand.label()} infeasible: " + "; ".join(problems))

    if estimand.kind == "point":
        check_point(estimand.t, estimand.s)
    elif estimand.kind == "lag_aggregate":
        for s in range(len(estimand.weights)):
            check_point(estimand.t, s)
    else:
        for t in estimand.t_values:
            check_point(t, estimand.s)


# ---------------------------------------------------------------------------
# estimate mode


def _fit_estimand(panel, partition, cfg: RunConfig, estimand: EstimandSpec):
    preset = cfg.estimator.presets[0]
    est = cfg.estimator

    def fit_point(t, s, keep_influence):
        v, z, b, d = default_dictionaries(panel, t, s, cfg.q, cfg.p, cfg.model,
                                          est.dictionaries)
        gamma_spec, riesz_spec, debiased = build_specs(
            preset, v, z, b, d, penalty=est.penalty, riesz_penalty=est.riesz_penalty
        )
        kwargs = dict(model=cfg.model, q=cfg.q, p=cfg.p, ci_level=est.ci_level,
                      base_seed=cfg.seed, keep_influence=keep_influence)
        if debiased:
            return debiased_theta(panel, partition, t, s, gamma_spec, riesz_spec, **kwargs)
        return plugin_theta(panel, partition, t, s, gamma_spec, **kwargs)

    if estimand.kind == "point":
        return fit_point(estimand.t, estimand.s, keep_influence=False)
    if estimand.kind == "lag_aggregate":
        parts = [fit_point(estimand.t, s, keep_influence=True)
                 for s in range(len(estimand.weights))]
        return aggregate_over_lags(parts, estimand.weights, ci_level=est.ci_level)
    parts = [fit_point(t, estimand.s, keep_influence=True)
             for t in estimand.t_values]
    return aggregate_over_periods(parts, estimand.weights, ci_level=est.ci_level)


def _fmt(x, places=4):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "nan"
    return f"{x:.{places}f}"


def _render_estimate_tables(cfg, results):
    labels = [label for label, _ in results]
    csv_lines = ["estimand,point,std_error,ci_lower,ci_upper,n_units"]
    for label, rep in results:
        csv_lines.append(",".join([
            label, _fmt(rep.point), _fmt(rep.std_error),
            _fmt(rep.ci_lower), _fmt(rep.ci_upper), str(rep.n_units),
        ]))

    cells = [f"{_fmt(rep.point)} ({_fmt(rep.std_error)})" for _, rep in results]
    treatment = cfg.data.treatment
    width0 = max(len("treatment"), len(treatment))
    widths = [max(len(lab), len(cell)) for lab, cell in zip(labels, cells)]
    header = "  ".join(["treatment".ljust(width0)]
                       + [lab.rjust(w) for lab, w in zip(labels, widths)])
    row = "  ".join([treatment.ljust(width0)]
                    + [cell.rjust(w) for cell, w in zip(cells, widths)])
    rule = "-" * len(header)
    pct = round(cfg.estimator.ci_level * 100)
    txt_lines = [
        f"Average-derivative estimates ({cfg.estimator.presets[0]}); "
        f"standard errors in parentheses; {pct}% CIs in table.csv",
        rule, header, rule, row, rule,
    ]
    return "\n".join(csv_lines) + "\n", "\n".join(txt_lines) + "\n"


def run_estimate(cfg: RunConfig) -> dict:
    """Estimate every configured estimand on the input panel; returns the
    rendered artifacts keyed by file name."""
    try:
        panel = load_panel(cfg.data.path, cfg.data.schema())
    except OSError as exc:
        raise DataError(f"cannot read panel file {cfg.data.path}: {exc}") from exc
    _log.info("loaded panel: %d units x %d periods, %d covariates, "
              "%d instruments, %d invariants", panel.n_units, panel.n_periods,
              panel.n_covariates, panel.n_instruments, panel.n_invariant)
    if panel.n_units < cfg.estimator.folds:
        raise ConfigError(
            f"{panel.n_units} units cannot be split into {cfg.estimator.folds} folds"
        )
    for estimand in cfg.estimands:
        check_estimand_feasibility(estimand, panel.n_periods, cfg.q, cfg.p, cfg.model)

    partition = split_folds(panel.n_units, cfg.estimator.folds, cfg.seed)
    results = []
    for estimand in cfg.estimands:
        _log.info("estimating %s", estimand.label())
        report = _fit_estimand(panel, partition, cfg, estimand)
        _log.info("%s = %.4f (%.4f)", estimand.label(), report.point, report.std_error)
        results.append((estimand.label(), report))

    report_json = json.dumps(
        {
            "mode": "estimate",
            "config": config_to_dict(cfg),
            "results": [dict(estimand_label=label, **rep.to_dict())
                        for label, rep in results],
        },
        indent=2, sort_keys=True,
    ) + "\n"
    table_csv, table_txt = _render_estimate_tables(cfg, results)
    return {"report.json": report_json, "table.csv": table_csv,
            "table.txt": table_txt}


# ---------------------------------------------------------------------------
# simulate mode

METRIC_ROWS = (
    ("mean_estimate", "Estimate"),
    ("bias", "Bias"),
    ("std_dev", "Std. Dev."),
    ("mse", "MSE"),
    ("mean_est_sd", "Est. S.D."),
    ("coverage", "Coverage"),
)


def _cell_label(variant, n, n_cov, estimand):
    return f"{variant}, N={n}, L={n_cov}, {estimand.label()}"


def _render_simulate_tables(cfg, cells):
    presets = list(cfg.estimator.presets)
    csv_lines = ["dgp,n_units,n_covariates,estimand,preset,truth,"
                 "mean_estimate,bias,std_dev,mse,mean_est_sd,coverage,"
                 "n_effective,n_excluded"]
    for (variant, n, n_cov, estimand), by_preset in cells:
        for pz in presets:
            m = by_preset[pz].metrics
            csv_lines.append(",".join([
                variant, str(n), str(n_cov), estimand.label(), pz,
                _fmt(m["truth"]), _fmt(m["mean_estimate"]), _fmt(m["bias"]),
                _fmt(m["std_dev"]), _fmt(m["mse"]), _fmt(m["mean_est_sd"]),
                _fmt(m["coverage"]), str(m["n_effective"]), str(m["n_excluded"]),
            ]))

    txt = []
    name_w = max(len(label) for _, label in METRIC_ROWS)
    col_w = max(9, max(len(pz) for pz in presets))
    for (variant, n, n_cov, estimand), by_preset in cells:
        truth = by_preset[presets[0]].truth
        r_eff = {pz: by_preset[pz].metrics["n_effective"] for pz in presets}
        txt.append(f"{_cell_label(variant, n, n_cov, estimand)}   "
                   f"[truth {_fmt(truth)}, R={cfg.replications}]")
        header = " ".join([" " * name_w] + [pz.rjust(col_w) for pz in presets])
        txt.append(header)
        txt.append("-" * len(header))
        for key, label in METRIC_ROWS:
            cells_txt = [_fmt(by_preset[pz].metrics[key]).rjust(col_w) for pz in presets]
            txt.append(" ".join([label.ljust(name_w)] + cells_txt))
        excluded = [str(cfg.replications - r_eff[pz]).rjust(col_w) for pz in presets]
        txt.append(" ".join(["Excluded".ljust(name_w)] + excluded))
        txt.append("")
    return "\n".join(csv_lines) + "\n", "\n".join(txt)


def _render_replications_csv(cells):
    lines = ["dgp,n_units,n_covariates,estimand,preset,replication,"
             "estimate,std_error,ci_lower,ci_upper,covered,error"]
    for (variant, n, n_cov, estimand), by_preset in cells:
        for pz, result in by_preset.items():
            rows = {}
            for i, r in enumerate(result.replication_ids):
                rows[int(r)] = [
                    repr(float(result.estimates[i])),
                    repr(float(result.std_errors[i])),
                    repr(float(result.ci_lower[i])),
                    repr(float(result.ci_upper[i])),
                    str(int(result.covered[i])),
                    "",
                ]
            for r, message in result.failures:
                rows[int(r)] = ["", "", "", "", "", '"' + message.replace('"', "'") + '"']
            for r in sorted(rows):
                lines.append(",".join([variant, str(n), str(n_cov),
                                       estimand.label(), pz, str(r)] + rows[r]))
    return "\n".join(lines) + "\n"


def run_simulate(cfg: RunConfig) -> dict:
    """Run the Monte Carlo grid; returns rendered artifacts keyed by name."""
    for estimand in cfg.estimands:
        check_estimand_feasibility(estimand, cfg.dgp.n_periods, cfg.q, cfg.p, cfg.model)
    for n in cfg.dgp.n_units:
        if n < cfg.estimator.folds:
            raise ConfigError(f"{n} units cannot be split into {cfg.estimator.folds} folds")
    n_jobs = cfg.threads or (os.cpu_count() or 1)
    cells = []
    json_cells = []
    for n in cfg.dgp.n_units:
        for n_cov in cfg.dgp.n_covariates:
            dgp = DgpSpec(cfg.dgp.variant, n, cfg.dgp.n_periods, n_cov)
            for estimand in cfg.estimands:
                by_preset = {}
                for pz in cfg.estimator.presets:
                    _log.info("cell %s, preset %s: %d replications",
                              _cell_label(cfg.dgp.variant, n, n_cov, estimand),
                              pz, cfg.replications)
                    result = run_monte_carlo(
                        dgp, pz, estimand, cfg.replications, cfg.seed,
                        k_folds=cfg.estimator.folds, q=cfg.q,
                        ci_level=cfg.estimator.ci_level, n_jobs=n_jobs,
                        penalty=cfg.estimator.penalty,
                        riesz_penalty=cfg.estimator.riesz_penalty,
                    )
                    _log.info("  %s: bias %.4f, coverage %.3f", pz,
                              result.metrics["bias"], result.metrics["coverage"])
                    by_preset[pz] = result
                    json_cells.append({
                        "dgp": cfg.dgp.variant, "n_units": n, "n_covariates": n_cov,
                        "estimand": _estimand_dict(estimand), "preset": pz,
                        "metrics": result.metrics,
                        "failures": [{"replication": r, "error": msg}
                                     for r, msg in result.failures],
                    })
                cells.append(((cfg.dgp.variant, n, n_cov, estimand), by_preset))

    report_json = json.dumps(
        {"mode": "simulate", "config": config_to_dict(cfg), "results": json_cells},
        indent=2, sort_keys=True,
    ) + "\n"
    table_csv, table_txt = _render_simulate_tables(cfg, cells)
    return {
        "report.json": report_json,
        "table.csv": table_csv,
        "table.txt": table_txt,
        "replications.csv": _render_replications_csv(cells),
    }


# ---------------------------------------------------------------------------
# output plumbing and entry point


def write_outputs(output_dir: str, artifacts: dict):
    """Write every artifact via a temp file + atomic rename; either all files
    appear or none do (renames happen only after every temp write succeeds)."""
    os.makedirs(output_dir, exist_ok=True)
    staged = []
    try:
        for name, text in artifacts.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=output_dir)
            staged.append((tmp, os.path.join(output_dir, name)))
            with os.fdopen(fd, "w", encoding=OUTPUT_ENCODING, newline="\n") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            try:
                os.unlink(tmp)
            except OSError:
                pass
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


_EXIT_CODES = (
    (ConfigError, 2), (LagError, 2), (DomainError, 2),
    (DataError, 3),
    (NumericError, 4), (PanelDMLError, 4),
)


def _exit_code(exc) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panel-dml",
        description="Debiased average-derivative estimation for two-way "
                    "fixed-effect panels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("estimate", "fit estimands on a panel CSV"),
                            ("simulate", "Monte Carlo study on a synthetic DGP")):
        pz = sub.add_parser(name, help=help_text)
        pz.add_argument("config", help="YAML run configuration")
        pz.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        dest="overrides", help="override a config entry")
        pz.add_argument("--seed", type=int, default=None, help="override the run seed")
        pz.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: machine parallelism)")
        pz.add_argument("--output-dir", default=None, help="override output.dir")
        pz.add_argument("--quiet", action="store_true", help="suppress progress logs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
    )
    try:
        cfg = load_config(args.config, args.command, assignments=args.overrides,
                          seed=args.seed, threads=args.threads,
                          output_dir=args.output_dir)
        artifacts = run_estimate(cfg) if args.command == "estimate" else run_simulate(cfg)
        write_outputs(cfg.output_dir, artifacts)
    except PanelDMLError as exc:
        code = _exit_code(exc)
        print(json.dumps({"error": {"type": type(exc).__name__,
                                    "message": str(exc), "exit_code": code}},
                         sort_keys=True))
        return code
    except Exception as exc:  # noqa: BLE001 - last-resort contract: exit 1
        print(json.dumps({"error": {"type": type(exc).__name__,
                                    "message": str(exc), "exit_code": 1}},
                         sort_keys=True))
        return 1
    sys.stdout.write(artifacts["table.txt"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
