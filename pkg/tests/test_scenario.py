from __future__ import annotations

import pytest

from prfpp.errors import ValidationError
from prfpp.mfg import Uniform
from prfpp.scenario import (
    ScenarioParseError,
    ScenarioInvariantError,
    ScenarioSchemaError,
    bundled_scenarios,
    dump_scenario,
    load_scenario,
    parse_scenario,
    scenario_hash,
)

SHORTING = """\
name: pair
mode: nash-2agent
p_cn: 0.6
agents:
  - {gamma: 10.0, theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.6, p_bear: 0.36}
  - {gamma: 10.0, theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.46, p_bear: 0.2}
"""

EXPECTED_BUNDLE = {
    "benchmark_mfg", "figure1", "figure2", "figure3", "figure4", "figure5",
    "homogeneous_benchmark", "independent", "shorting_2agent", "single_stock",
}


def test_bundle_is_complete():
    assert set(bundled_scenarios()) == EXPECTED_BUNDLE


@pytest.mark.parametrize("name", sorted(EXPECTED_BUNDLE))
def test_bundled_scenarios_load_and_round_trip(name):
    sf = load_scenario(name)
    assert sf.name == name
    again = parse_scenario(dump_scenario(sf), "dump.yaml")
    assert again == sf
    assert scenario_hash(again) == sf.hash


def test_benchmark_defaults():
    sf = load_scenario("benchmark_mfg")
    assert sf.solver["samples"] == 10_000
    assert sf.cn.p_cn == 0.6
    assert sf.solver["tol"] == 1e-12
    spec = sf.population_spec()
    assert spec.gamma == Uniform(2.0, 4.0) and spec.theta == Uniform(0.2, 0.6)
    assert sf.fixed_agent().market.p == pytest.approx(0.52)


def test_load_from_path(tmp_path):
    f = tmp_path / "pair.yaml"
    f.write_text(SHORTING)
    sf = load_scenario(f)
    assert sf.mode == "nash-2agent" and len(sf.agent_specs()) == 2


def test_missing_file_is_validation_error():
    with pytest.raises(ValidationError, match="not found"):
        load_scenario("no_such_scenario")


def test_invariant_error_points_at_line():
    bad = SHORTING.replace("d: 0.9, p_bull: 0.46", "d: 1.1, p_bull: 0.46")
    with pytest.raises(ScenarioInvariantError) as err:
        parse_scenario(bad, "pair.yaml")
    assert "pair.yaml:6: agents.1.d: d must be < 1" in str(err.value)


def test_unknown_key_is_schema_error():
    with pytest.raises(ScenarioSchemaError, match=r"pair.yaml:7: bogus: unknown key 'bogus'"):
        parse_scenario(SHORTING + "bogus: 1\n", "pair.yaml")


@pytest.mark.parametrize(
    "old, new, match",
    [
        ("mode: nash-2agent", "mode: nash", "mode must be one of"),
        ("gamma: 10.0, theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.6",
         "gamma: ten, theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.6", "agents.0.gamma"),
        ("  - {gamma: 10.0, theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.46, p_bear: 0.2}\n", "", "exactly 2"),
        ("p_cn: 0.6\n", "", "missing required key 'p_cn'"),
    ],
)
def test_schema_errors(old, new, match):
    with pytest.raises(ScenarioSchemaError, match=match):
        parse_scenario(SHORTING.replace(old, new), "pair.yaml")


def test_parse_error_is_distinct():
    with pytest.raises(ScenarioParseError, match="pair.yaml:4"):
        parse_scenario(SHORTING.replace("p_cn: 0.6", "p_cn: [0.6"), "pair.yaml")
    assert not issubclass(ScenarioParseError, ScenarioSchemaError)
    assert issubclass(ScenarioInvariantError, ValidationError)


def test_theta_outside_unit_interval():
    with pytest.raises(ScenarioInvariantError, match="theta must lie in"):
        parse_scenario(SHORTING.replace("theta: 0.9, u: 1.1, d: 0.9, p_bull: 0.6", "theta: 1.5, u: 1.1, d: 0.9, p_bull: 0.6"))


def test_population_support_checked_at_load():
    text = load_scenario("benchmark_mfg")
    bad = dump_scenario(text).replace("- 0.94", "- 1.02")
    with pytest.raises(ScenarioInvariantError, match="population"):
        parse_scenario(bad, "bad.yaml")


def test_grid_expansion_and_overrides():
    sf = load_scenario("figure1")
    own = next(s for s in sf.sweeps if s["name"] == "own_theta")
    assert own["values"] == pytest.approx([0.2 + 0.05 * k for k in range(9)])
    fig5 = load_scenario("figure5")
    first = fig5.sweeps[0]
    assert fig5.fixed_agent(first["agent"]).market.p_bull == first["agent"]["p_bull"]
    assert fig5.fixed_agent(first["agent"]).market.p == pytest.approx(0.6)


def test_with_solver_overrides_change_hash():
    sf = load_scenario("benchmark_mfg")
    other = sf.with_solver(seed=5, samples=None)
    assert other.solver["seed"] == 5 and other.solver["samples"] == 10_000
    assert other.hash != sf.hash
    assert sf.with_solver() == sf
    with pytest.raises(ValidationError):
        sf.with_solver(samples=0)


@pytest.mark.parametrize("block", ["{slope_grid: [0, 20]}", "{slope_grid: [5, 1, 10]}", "{limit_n: [2, 0.5]}"])
def test_verify_block_checked(block):
    with pytest.raises(ScenarioInvariantError, match="verify"):
        parse_scenario(SHORTING + f"verify: {block}\n", "pair.yaml")
