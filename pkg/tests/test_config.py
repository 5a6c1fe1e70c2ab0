import copy

import numpy as np
import pytest
import yaml

from eulerheat.config import (ConfigError, apply_overrides, build_ensemble, build_trials, builtin_names,
                              load_scenario, resolve, scenario_hash, setup_hash, time_levels)

BUILTINS = ["constant-b", "graph-mode1", "graph-mode1-corrupted", "graph-mode1-pde", "random-ensemble-seeded",
            "two-lines-opposed", "two-lines-parallel", "winding-line"]

LINE = {
    "name": "t",
    "dim": 2,
    "ensemble": {"loops": [{"winding": [1, 0], "mean": [0.0, 0.5], "modes": []}], "weights": [1.0]},
    "grid": {"n": 16},
    "time": {"T": 0.01, "dt": 0.001},
}


def line_raw(**changes):
    raw = copy.deepcopy(LINE)
    raw.update(changes)
    return raw


def test_builtins_listed():
    assert builtin_names() == BUILTINS


@pytest.mark.parametrize("name", BUILTINS)
def test_builtins_resolve(name):
    cfg = load_scenario(name)
    assert cfg["name"] == name
    assert cfg["M"] >= 4 * cfg["grid"]["n"]
    assert resolve(cfg) == cfg  # resolving is idempotent


def test_defaults_filled():
    cfg = resolve(line_raw())
    assert cfg["M"] == 64
    assert cfg["kernel"] == {"kind": "bspline2", "width": 1.5}
    assert cfg["certify"]["r_multipliers"] == [1.0, 2.0, 4.0]
    assert cfg["identity"] == {"M": 64, "dt": 0.001, "T": 0.01}


@pytest.mark.parametrize("change,message", [
    ({"bogus": 1}, "unknown top-level"),
    ({"name": 3}, "string 'name'"),
    ({"dim": 0}, "dim must be a positive int"),
    ({"grid": {"n": 4}}, "grid.n must be >= 8"),
    ({"grid": {"n": 16, "m": 3}}, r"grid: unknown key\(s\) \['m'\]"),
    ({"kernel": {"kind": "tent"}}, "unknown kernel kind"),
    ({"time": {"T": 0.01, "dt": 0.003}}, "whole number of steps"),
    ({"time": {"T": -1, "dt": 0.001}}, "time.T must be a positive float"),
    ({"M": 32}, r"M=32 is below max\(4K\+4, 4n\) = 64"),
    ({"K": 2.5}, "K must be a positive int"),
    ({"ensemble": None}, "needs an 'ensemble' or a 'pde'"),
    ({"ensemble": {"loops": [{"winding": [1, 0, 0], "mean": [0, 0, 0], "modes": []}], "weights": [1.0]}}, "3-D but dim=2"),
    ({"certify": {"r_multipliers": [0.5]}}, "r below r0 is refused"),
    ({"trials": {"constant": [1.0]}}, "must have 2 entries"),
    ({"corruption": {"B_scale": 0}}, "corruption.B_scale must be a positive"),
    ({"pde": {"rho": "deposit"}}, "pde.b .* is required"),
    ({"pde": {"b": {"terms": [{"amp": [1, 0], "k": [0, 0]}]}, "nu": -1}}, "pde.nu must be >= 0"),
])
def test_validation_messages(change, message):
    with pytest.raises(ConfigError, match=message) as info:
        resolve(line_raw(**change))
    if "name" not in change:
        assert str(info.value).startswith("t:") or "top-level" in str(info.value)


def test_mode_above_truncation_rejected():
    raw = line_raw(K=1)
    raw["ensemble"]["loops"][0]["modes"] = [{"k": 2, "re": [0, 0], "im": [0, 0.01]}]
    with pytest.raises(ConfigError, match="above the truncation K=1"):
        resolve(raw)


def test_load_from_path_and_errors(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(line_raw()))
    assert load_scenario(path)["name"] == "t"
    with pytest.raises(ConfigError, match="unknown builtin scenario 'nope'"):
        load_scenario("nope")
    with pytest.raises(ConfigError, match="does not exist"):
        load_scenario(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="must be a mapping"):
        load_scenario(bad)


def test_overrides():
    cfg = load_scenario("winding-line")
    out = apply_overrides(cfg, n=128, dt=5e-4, seed=3)
    assert out["grid"]["n"] == 128 and out["M"] == 512
    assert out["time"]["dt"] == 5e-4 and out["identity"]["dt"] == 5e-4
    assert out["seed"] == 3
    assert cfg["grid"]["n"] == 64  # input untouched
    assert apply_overrides(cfg, M=1024)["M"] == 1024
    with pytest.raises(ConfigError, match="below"):
        apply_overrides(cfg, M=16)


def test_hashes_stable_and_sensitive():
    a = load_scenario("graph-mode1")
    b = load_scenario("graph-mode1")
    assert scenario_hash(a) == scenario_hash(b)
    assert len(scenario_hash(a)) == 16
    seeded = apply_overrides(a, seed=99)
    assert scenario_hash(seeded) != scenario_hash(a)
    assert setup_hash(seeded) == setup_hash(a)
    assert setup_hash(apply_overrides(a, n=64)) != setup_hash(a)


def test_loop_and_pde_scenarios_share_setup():
    assert setup_hash(load_scenario("graph-mode1")) == setup_hash(load_scenario("graph-mode1-pde"))
    assert setup_hash(load_scenario("graph-mode1")) != setup_hash(load_scenario("winding-line"))


def test_random_ensemble_seeded():
    cfg = load_scenario("random-ensemble-seeded")
    e1, e2 = build_ensemble(cfg), build_ensemble(cfg)
    assert len(e1.loops) == 3 and e1.K == 3
    assert e1.weights.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(e1.loops[0].coeffs, e2.loops[0].coeffs)
    other = build_ensemble(apply_overrides(cfg, seed=8))
    assert not np.array_equal(e1.loops[0].coeffs, other.loops[0].coeffs)


def test_trials_order():
    trials = build_trials(load_scenario("graph-mode1"))
    assert [t.family for t in trials[:2]] == ["zero", "graph-exact"]
    assert len(trials) == 12
    assert all(t.family == "random" for t in trials[2:])
    assert trials[2].params["seed"] == load_scenario("graph-mode1")["seed"]


def test_time_levels():
    np.testing.assert_allclose(time_levels(0.01, 0.001), np.arange(11) * 0.001)
    assert len(time_levels(0.05, 1e-4)) == 501
