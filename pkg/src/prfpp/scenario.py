"""YAML scenario files: schema, validation and round-tripping.

A scenario names a solver mode, the model parameters for that mode,
solver settings and optional sweep blocks.  Unknown keys are rejected and
every error message carries the line of the offending entry.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ValidationError
from .market import (
    AgentPreferences,
    AgentSpec,
    CommonNoiseParams,
    MarketPeriodParams,
    preference_violations,
    validate,
)
from .mfg import PARAMS, Constant, PopulationSpec, Uniform

MODES = ("nash-homogeneous", "nash-2agent", "mfg", "single-stock", "independent")
SWEEP_PARAMETERS = ("theta", "gamma", "volatility", "expected_return", "skew_up", "skew_down")
SWEEP_TARGETS = ("agent", "network")
DIRECTIONS = ("increasing", "decreasing")

SOLVER_DEFAULTS = {"tol": 1e-12, "max_iter": 10_000, "samples": 10_000, "seed": 0}
VERIFY_DEFAULTS = {"limit_n": [2, 10, 100, 10_000], "slope_grid": [0.0, 20.0, 41]}

AGENT_KEYS = {"gamma", "theta", "x0", "u", "d", "p", "p_bull", "p_bear"}
PREF_KEYS = {"gamma", "theta", "x0"}
COMMON_KEYS = {"name", "description", "mode", "solver", "verify", "horizon"}
MODE_KEYS = {
    "nash-homogeneous": {"p_cn", "agents", "n_agents"},
    "nash-2agent": {"p_cn", "agents"},
    "mfg": {"p_cn", "population", "fixed_agent", "sweeps"},
    "single-stock": {"market", "agents", "aggregates"},
    "independent": {"agents", "n_agents"},
}
SWEEP_KEYS = {"name", "target", "parameter", "values", "grid", "expected", "agent", "network"}


class ScenarioParseError(ValidationError):
    """The file is not well-formed YAML."""


class ScenarioSchemaError(ValidationError):
    """Keys or value types do not match the scenario schema."""


class ScenarioInvariantError(ValidationError):
    """Values are well-typed but break a model invariant."""


# ---------------------------------------------------------------------------
# YAML with line numbers

_SCALARS = yaml.constructor.SafeConstructor()

def _plain(node: yaml.Node, path: tuple, lines: dict[tuple, int]) -> Any:
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            if key in out:
                raise ScenarioSchemaError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
            out[key] = _plain(value_node, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return _SCALARS.construct_object(node, deep=True)


class _Checker:
    def __init__(self, lines: dict[tuple, int], source: str):
        self.lines = lines
        self.source = source
        self.schema: list[str] = []
        self.invariant: list[str] = []

    def where(self, path: tuple) -> str:
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        line = self.lines.get(probe)
        dotted = ".".join(str(p) for p in path) or "<root>"
        return f"{self.source}:{line}: {dotted}" if line else f"{self.source}: {dotted}"

    def bad_schema(self, path: tuple, msg: str) -> None:
        self.schema.append(f"{self.where(path)}: {msg}")

    def bad_value(self, path: tuple, msg: str) -> None:
        self.invariant.append(f"{self.where(path)}: {msg}")

    def keys(self, data: Any, path: tuple, allowed: set[str], required: set[str] = frozenset()) -> bool:
        if not isinstance(data, dict):
            self.bad_schema(path, "expected a mapping")
            return False
        for k in data:
            if k not in allowed:
                self.bad_schema(path + (k,), f"unknown key {k!r}")
        for k in sorted(required - set(data)):
            self.bad_schema(path, f"missing required key {k!r}")
        return True

    def real(self, data: dict, key: str, path: tuple) -> float | None:
        v = data.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.bad_schema(path + (key,), f"{key} must be a finite number")
            return None
        return float(v)

    def integer(self, data: dict, key: str, path: tuple, lo: int = 1) -> int | None:
        v = data.get(key)
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if isinstance(v, bool) or not isinstance(v, int):
            self.bad_schema(path + (key,), f"{key} must be an integer")
            return None
        if v < lo:
            self.bad_value(path + (key,), f"{key} must be >= {lo}")
        return v


def _field_path(path: tuple, message: str) -> tuple:
    head = message.split(" ", 1)[0]
    return path + (head,) if head in AGENT_KEYS | {"p_cn"} else path


# ---------------------------------------------------------------------------
# Normalization

def _agent(chk: _Checker, raw: Any, path: tuple, p_cn: float | None, keys: set[str],
           required: set[str]) -> dict | None:
    if not chk.keys(raw, path, keys, required):
        return None
    out = {}
    for k in sorted(raw):
        if k in keys:
            v = chk.real(raw, k, path)
            if v is not None:
                out[k] = v
    if len(out) != len([k for k in raw if k in keys]):
        return None
    if "gamma" in keys:
        out.setdefault("x0", 0.0)
    if "p_bull" in out and "p_bear" in out and "p" not in out and p_cn is not None:
        out["p"] = p_cn * out["p_bull"] + (1 - p_cn) * out["p_bear"]
    if {"p_bull", "p_bear"} <= set(out) or {"u", "d"} <= set(out):
        data = dict(out)
        if "p_bull" not in data and "p" in data:
            data.update(p_bull=data["p"], p_bear=data["p"], degenerate_ok=True)
        for msg in validate(data, p_cn if {"p_bull", "p_bear"} <= set(out) else None):
            chk.bad_value(_field_path(path, msg), msg)
    elif "gamma" in out:
        for msg in preference_violations(out["gamma"], out["theta"], out["x0"]):
            chk.bad_value(_field_path(path, msg), msg)
    return out


def _distribution(chk: _Checker, raw: Any, path: tuple) -> dict | None:
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return {"constant": float(raw)}
    if not chk.keys(raw, path, {"constant", "uniform"}):
        return None
    if len(raw) != 1:
        chk.bad_schema(path, "give exactly one of 'constant' or 'uniform'")
        return None
    if "constant" in raw:
        v = chk.real(raw, "constant", path)
        return None if v is None else {"constant": v}
    bounds = raw["uniform"]
    if (not isinstance(bounds, list) or len(bounds) != 2
            or any(isinstance(b, bool) or not isinstance(b, (int, float)) for b in bounds)):
        chk.bad_schema(path + ("uniform",), "uniform needs [lo, hi]")
        return None
    lo, hi = float(bounds[0]), float(bounds[1])
    if lo > hi:
        chk.bad_value(path + ("uniform",), "uniform lower bound exceeds upper bound")
    return {"uniform": [lo, hi]}


def _to_dist(d: dict) -> Constant | Uniform:
    return Constant(d["constant"]) if "constant" in d else Uniform(*d["uniform"])


def _grid_values(chk: _Checker, sweep: dict, path: tuple) -> list[float] | None:
    if ("values" in sweep) == ("grid" in sweep):
        chk.bad_schema(path, "give exactly one of 'values' or 'grid'")
        return None
    if "values" in sweep:
        vals = sweep["values"]
        if not isinstance(vals, list) or not vals or any(
                isinstance(v, bool) or not isinstance(v, (int, float)) for v in vals):
            chk.bad_schema(path + ("values",), "values must be a nonempty list of numbers")
            return None
        return [float(v) for v in vals]
    grid = sweep["grid"]
    if not chk.keys(grid, path + ("grid",), {"start", "stop", "num"}, {"start", "stop", "num"}):
        return None
    start, stop = chk.real(grid, "start", path + ("grid",)), chk.real(grid, "stop", path + ("grid",))
    num = chk.integer(grid, "num", path + ("grid",), lo=2)
    if None in (start, stop, num):
        return None
    step = (stop - start) / (num - 1)
    return [round(start + i * step, 12) for i in range(num)]


def _normalize(raw: Any, chk: _Checker) -> dict:
    if not chk.keys(raw, (), set().union(COMMON_KEYS, *MODE_KEYS.values()), {"mode"}):
        raise ScenarioSchemaError(chk.schema)
    mode = raw["mode"]
    if mode not in MODES:
        chk.bad_schema(("mode",), f"mode must be one of {', '.join(MODES)}")
        raise ScenarioSchemaError(chk.schema)
    allowed = COMMON_KEYS | MODE_KEYS[mode]
    for k in raw:
        if k not in allowed and k in set().union(*MODE_KEYS.values()):
            chk.bad_schema((k,), f"key {k!r} is not used by mode {mode!r}")

    out: dict[str, Any] = {"name": str(raw.get("name", "scenario")), "mode": mode}
    if "description" in raw:
        out["description"] = str(raw["description"])

    solver = dict(SOLVER_DEFAULTS)
    if "solver" in raw and chk.keys(raw["solver"], ("solver",), set(SOLVER_DEFAULTS)):
        for k in raw["solver"]:
            if k in ("tol",):
                v = chk.real(raw["solver"], k, ("solver",))
                if v is not None and not v > 0:
                    chk.bad_value(("solver", k), "tol must be > 0")
            elif k in SOLVER_DEFAULTS:
                v = chk.integer(raw["solver"], k, ("solver",), lo=0 if k == "seed" else 1)
            else:
                continue
            if v is not None:
                solver[k] = v
    out["solver"] = solver

    verify = copy.deepcopy(VERIFY_DEFAULTS)
    if "verify" in raw and chk.keys(raw["verify"], ("verify",), set(VERIFY_DEFAULTS)):
        for k, v in raw["verify"].items():
            if k in verify:
                if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
                    chk.bad_schema(("verify", k), f"{k} must be a list of numbers")
                elif k == "limit_n":
                    if not v or any(x != int(x) or x < 1 for x in v):
                        chk.bad_value(("verify", k), "limit_n must list integers >= 1")
                    else:
                        verify[k] = [int(x) for x in v]
                else:
                    if len(v) != 3 or not 0 <= v[0] < v[1] or v[2] != int(v[2]) or v[2] < 2:
                        chk.bad_value(("verify", k), "slope_grid must be [lo >= 0, hi > lo, points >= 2]")
                    else:
                        verify[k] = [float(v[0]), float(v[1]), int(v[2])]
    out["verify"] = verify

    horizon = 1
    if "horizon" in raw:
        horizon = chk.integer(raw, "horizon", ()) or 1
    out["horizon"] = horizon

    p_cn = None
    if "p_cn" in MODE_KEYS[mode]:
        if "p_cn" not in raw:
            chk.bad_schema((), "missing required key 'p_cn'")
        else:
            p_cn = chk.real(raw, "p_cn", ())
            if p_cn is not None and not 0 < p_cn < 1:
                chk.bad_value(("p_cn",), "p_cn must lie strictly inside (0, 1)")
                p_cn = None
            out["p_cn"] = p_cn

    full = {"gamma", "theta", "u", "d", "p_bull", "p_bear"}
    if mode in ("nash-homogeneous", "nash-2agent"):
        want = 1 if mode == "nash-homogeneous" else 2
        agents = raw.get("agents")
        if not isinstance(agents, list) or len(agents) != want:
            chk.bad_schema(("agents",), f"mode {mode!r} needs exactly {want} agent(s)")
        else:
            out["agents"] = [_agent(chk, a, ("agents", i), p_cn, AGENT_KEYS, full) for i, a in enumerate(agents)]
        if mode == "nash-homogeneous":
            out["n_agents"] = chk.integer(raw, "n_agents", ())
    elif mode == "mfg":
        pop = raw.get("population")
        if chk.keys(pop, ("population",), set(PARAMS), set(PARAMS)):
            out["population"] = {k: _distribution(chk, pop[k], ("population", k)) for k in PARAMS if k in pop}
        if "fixed_agent" in raw:
            out["fixed_agent"] = _agent(chk, raw["fixed_agent"], ("fixed_agent",), p_cn, AGENT_KEYS, full)
        else:
            chk.bad_schema((), "missing required key 'fixed_agent'")
        sweeps = raw.get("sweeps", [])
        if not isinstance(sweeps, list):
            chk.bad_schema(("sweeps",), "sweeps must be a list")
            sweeps = []
        out["sweeps"] = [_sweep(chk, s, ("sweeps", i), p_cn) for i, s in enumerate(sweeps)]
    elif mode == "single-stock":
        market = raw.get("market")
        if chk.keys(market, ("market",), {"u", "d", "p"}, {"u", "d", "p"}):
            out["market"] = _agent(chk, market, ("market",), None, {"u", "d", "p"}, {"u", "d", "p"})
        agents = raw.get("agents")
        if not isinstance(agents, list) or not agents:
            chk.bad_schema(("agents",), "agents must be a nonempty list")
        else:
            out["agents"] = [_agent(chk, a, ("agents", i), None, PREF_KEYS, {"gamma", "theta"})
                             for i, a in enumerate(agents)]
            thetas = [a["theta"] for a in out["agents"] if a and "theta" in a]
            if thetas and sum(thetas) / len(thetas) >= 1:
                chk.bad_value(("agents",), "mean theta must be < 1")
        if "aggregates" in raw:
            agg = raw["aggregates"]
            if chk.keys(agg, ("aggregates",), {"theta_bar", "inv_gamma_bar"}, {"theta_bar", "inv_gamma_bar"}):
                tb = chk.real(agg, "theta_bar", ("aggregates",))
                ig = chk.real(agg, "inv_gamma_bar", ("aggregates",))
                if tb is not None and not 0 <= tb < 1:
                    chk.bad_value(("aggregates", "theta_bar"), "theta_bar must lie in [0, 1)")
                if ig is not None and not ig > 0:
                    chk.bad_value(("aggregates", "inv_gamma_bar"), "inv_gamma_bar must be > 0")
                out["aggregates"] = {"theta_bar": tb, "inv_gamma_bar": ig}
    elif mode == "independent":
        agents = raw.get("agents")
        if not isinstance(agents, list) or not agents:
            chk.bad_schema(("agents",), "agents must be a nonempty list")
        else:
            out["agents"] = [_agent(chk, a, ("agents", i), None, AGENT_KEYS - {"p_bull", "p_bear"},
                                    {"gamma", "theta", "u", "d", "p"}) for i, a in enumerate(agents)]
        out["n_agents"] = chk.integer(raw, "n_agents", ()) if "n_agents" in raw else len(agents or [])

    if "population" in out and None not in out["population"].values() and p_cn is not None and not chk.invariant:
        try:
            PopulationSpec(**{k: _to_dist(v) for k, v in out["population"].items()}, p_cn=p_cn)
        except ValidationError as exc:
            for msg in exc.violations:
                chk.bad_value(("population",), msg)
    if chk.schema:
        raise ScenarioSchemaError(chk.schema)
    if chk.invariant:
        raise ScenarioInvariantError(chk.invariant)
    return out


def _sweep(chk: _Checker, raw: Any, path: tuple, p_cn: float | None) -> dict:
    if not chk.keys(raw, path, SWEEP_KEYS, {"name", "target", "parameter", "expected"}):
        return {}
    out: dict[str, Any] = {"name": str(raw["name"])}
    for key, choices in (("target", SWEEP_TARGETS), ("parameter", SWEEP_PARAMETERS), ("expected", DIRECTIONS)):
        if raw.get(key) not in choices:
            chk.bad_schema(path + (key,), f"{key} must be one of {', '.join(choices)}")
        out[key] = raw.get(key)
    out["values"] = _grid_values(chk, raw, path)
    agent_over = raw.get("agent", {})
    if chk.keys(agent_over, path + ("agent",), AGENT_KEYS - {"p", "x0"}):
        out["agent"] = {k: chk.real(agent_over, k, path + ("agent",)) for k in sorted(agent_over)}
    network_over = raw.get("network", {})
    if chk.keys(network_over, path + ("network",), set(PARAMS)):
        out["network"] = {k: _distribution(chk, v, path + ("network", k)) for k, v in sorted(network_over.items())}
    return out


# ---------------------------------------------------------------------------
# Public API

@dataclass(frozen=True, eq=False)
class ScenarioFile:
    data: dict
    source: str = "<memory>"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScenarioFile) and self.data == other.data

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def mode(self) -> str:
        return self.data["mode"]

    @property
    def solver(self) -> dict:
        return self.data["solver"]

    @property
    def sweeps(self) -> list[dict]:
        return self.data.get("sweeps", [])

    @property
    def cn(self) -> CommonNoiseParams:
        return CommonNoiseParams(self.data["p_cn"])

    @property
    def hash(self) -> str:
        return scenario_hash(self)

    def agent_specs(self) -> list[AgentSpec]:
        return [agent_from_dict(a, self.data.get("p_cn")) for a in self.data["agents"]]

    def fixed_agent(self, overrides: dict | None = None) -> AgentSpec:
        return agent_from_dict({**self.data["fixed_agent"], **(overrides or {})}, self.data["p_cn"])

    def population_spec(self, overrides: dict | None = None) -> PopulationSpec:
        dists = {**self.data["population"], **(overrides or {})}
        return PopulationSpec(**{k: _to_dist(v) for k, v in dists.items()}, p_cn=self.data["p_cn"])

    def with_solver(self, **settings: Any) -> ScenarioFile:
        """Override solver settings (``None`` keeps the current value) and revalidate."""
        data = copy.deepcopy(self.data)
        data["solver"].update({k: v for k, v in settings.items() if v is not None})
        return ScenarioFile(_normalize(data, _Checker({}, self.source)), self.source)


def agent_from_dict(a: dict, p_cn: float | None) -> AgentSpec:
    prefs = AgentPreferences(a["gamma"], a["theta"], a.get("x0", 0.0))
    if "p_bull" in a:
        if p_cn is None:
            raise ValidationError("regime probabilities need p_cn")
        market = MarketPeriodParams.from_regimes(a["u"], a["d"], a["p_bull"], a["p_bear"], p_cn)
    else:
        market = MarketPeriodParams.regime_free(a["u"], a["d"], a["p"])
    return AgentSpec(prefs, market)


def parse_scenario(text: str, source: str = "<string>") -> ScenarioFile:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ScenarioParseError(f"{where}: {getattr(exc, 'problem', None) or exc}") from exc
    if node is None:
        raise ScenarioSchemaError(f"{source}: empty scenario")
    lines: dict[tuple, int] = {}
    raw = _plain(node, (), lines)
    data = _normalize(raw, _Checker(lines, source))
    return ScenarioFile(data, source)


def bundled_scenarios() -> list[str]:
    root = resources.files("prfpp") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_scenario(path: str | Path) -> ScenarioFile:
    """Load a scenario file, or a bundled scenario by name (``benchmark_mfg``)."""
    p = Path(path)
    if p.is_file():
        return parse_scenario(p.read_text(encoding="utf-8"), str(p))
    name = p.name[:-5] if p.name.endswith(".yaml") else p.name
    res = resources.files("prfpp") / "scenarios" / f"{name}.yaml"
    if str(path) == name and res.is_file():
        return parse_scenario(res.read_text(encoding="utf-8"), f"{name}.yaml")
    raise ValidationError(f"scenario {str(path)!r} not found (bundled: {', '.join(bundled_scenarios())})")


def dump_scenario(sf: ScenarioFile) -> str:
    return yaml.safe_dump(sf.data, sort_keys=False, allow_unicode=True)


def scenario_hash(sf: ScenarioFile) -> str:
    blob = json.dumps(sf.data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
