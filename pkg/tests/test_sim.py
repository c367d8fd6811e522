from __future__ import annotations

import math

import numpy as np
import pytest

from pedesign.agents import AGENT_KINDS, AgentSpec
from pedesign.model import Environment, NoiseModel, TargetPolicy, fixture_env_E
from pedesign.sim import (
    MseCell,
    MseReport,
    SimConfig,
    closed_form_vs_mc,
    concentration_probe,
    empirical_regret,
    fit_loglog_slope,
    mse_experiment,
    split_rng,
    write_report_csv,
)


def make_config(**overrides):
    base = dict(
        env_ref="env-E",
        budgets=[60, 120],
        replications=50,
        master_seed=3,
        agents=[AgentSpec("oracle"), AgentSpec("on-policy")],
    )
    base.update(overrides)
    return SimConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(budgets=[100, 100])
    with pytest.raises(ValueError):
        make_config(replications=1)
    with pytest.raises(ValueError):
        make_config(agents=[])
    with pytest.raises(ValueError):
        make_config(agents=[AgentSpec("oracle"), AgentSpec("oracle")])
    with pytest.raises(ValueError):
        make_config(agents=[AgentSpec("on-policy")], regret=True)


def test_split_rng_is_deterministic_and_keyed():
    a = split_rng(5, 1, 2, 3).normal(size=4)
    b = split_rng(5, 1, 2, 3).normal(size=4)
    c = split_rng(5, 1, 2, 4).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_zero_noise_environment_gives_zero_mse():
    env, pi = fixture_env_E()
    env = Environment(features=env.features, theta_star=env.theta_star,
                      sigma_star=np.zeros((2, 2)), noise=NoiseModel("gaussian"))
    cfg = make_config(agents=[AgentSpec(kind) for kind in AGENT_KINDS], replications=3)
    report = mse_experiment(cfg, env, pi)
    for cell in report.cells:
        assert cell.error is None
        assert cell.mse == pytest.approx(0.0, abs=1e-16)


def test_mse_experiment_is_deterministic():
    cfg = make_config()
    first = mse_experiment(cfg)
    second = mse_experiment(cfg)
    for cell_a, cell_b in zip(first.cells, second.cells):
        assert np.array_equal(cell_a.values, cell_b.values)
        assert cell_a.mse == cell_b.mse and cell_a.stderr == cell_b.stderr


def test_workers_do_not_change_results():
    cfg = make_config()
    serial = mse_experiment(cfg)
    parallel = mse_experiment(make_config(workers=2))
    for cell_a, cell_b in zip(serial.cells, parallel.cells):
        assert np.array_equal(cell_a.values, cell_b.values)


def test_doubling_replications_roughly_halves_stderr_squared():
    base = make_config(agents=[AgentSpec("on-policy")], budgets=[100], replications=2000)
    double = make_config(agents=[AgentSpec("on-policy")], budgets=[100], replications=4000)
    small = mse_experiment(base).get("on-policy", 100).stderr
    large = mse_experiment(double).get("on-policy", 100).stderr
    ratio = large**2 / small**2
    assert 0.5 * 0.7 <= ratio <= 0.5 * 1.3


def test_failed_cell_is_recorded_not_fatal():
    env, _ = fixture_env_E()
    pi = TargetPolicy(np.array([1.0, 0.0, 0.0]))  # support does not span
    cfg = make_config(agents=[AgentSpec("oracle"), AgentSpec("on-policy")], replications=3)
    report = mse_experiment(cfg, env, pi)
    failed = report.get("on-policy", 60)
    assert failed.error is not None and math.isnan(failed.mse)
    assert report.get("oracle", 60).error is None
    assert report.has_errors


def test_empirical_regret_oracle_rows_are_zero():
    cfg = make_config()
    report = mse_experiment(cfg)
    regret = empirical_regret(report)
    for n in (60, 120):
        assert regret.get("oracle", n) == 0.0
    assert math.isnan(regret.slopes["oracle"])


def test_empirical_regret_requires_oracle():
    cfg = make_config(agents=[AgentSpec("on-policy")])
    report = mse_experiment(cfg)
    with pytest.raises(ValueError, match="oracle"):
        empirical_regret(report)


def test_slope_recovery_on_synthetic_power_law():
    budgets = [1000, 2000, 4000, 8000]
    cells = [MseCell("oracle", n, 1.0 / n, 0.0, np.zeros(2), {}) for n in budgets]
    cells += [
        MseCell("agent", n, 1.0 / n + 5.0 * n**-1.5, 0.0, np.zeros(2), {}) for n in budgets
    ]
    report = MseReport(true_value=0.0, replications=2, cells=cells)
    regret = empirical_regret(report)
    assert regret.slopes["agent"] == pytest.approx(-1.5, abs=1e-9)


def test_loglog_slope_floor_guards_nonpositive_values():
    slope = fit_loglog_slope([10, 100], [1e-3, -5.0])
    assert np.isfinite(slope)


def test_concentration_probe_zero_covariance():
    env, _ = fixture_env_E()
    env = Environment(features=env.features, theta_star=env.theta_star,
                      sigma_star=np.zeros((2, 2)), noise=NoiseModel("gaussian"))
    rows = concentration_probe(env, [50, 100], 20, seed=0)
    for row in rows:
        assert row["mean_error"] == pytest.approx(0.0, abs=1e-16)
        assert row["q90_error"] >= row["mean_error"] * 0  # nonnegative
        assert row["q90_error"] >= 0.0


def test_concentration_probe_rejects_small_gamma():
    env, _ = fixture_env_E()
    with pytest.raises(ValueError):
        concentration_probe(env, [1], 5, seed=0)


def test_closed_form_vs_mc_scalar_case():
    env = Environment(features=np.array([[1.0]]), theta_star=np.array([0.7]),
                      sigma_star=np.array([[0.4]]), noise=NoiseModel("gaussian"))
    pi = TargetPolicy(np.array([1.0]))
    closed, mc, rel = closed_form_vs_mc(env, pi, np.array([1.0]), n=50, replications=20000, seed=2)
    assert closed == pytest.approx(0.4 / 50)
    assert rel < 0.05


def test_replication_autocorrelation_is_negligible():
    cfg = make_config(agents=[AgentSpec("on-policy")], budgets=[60], replications=1000)
    values = mse_experiment(cfg).get("on-policy", 60).values
    centered = values - values.mean()
    rho = float(centered[:-1] @ centered[1:] / (centered @ centered))
    assert abs(rho) < 0.1


@pytest.mark.parametrize("fixture", ["env-E", "tabular-2", "unitball-d2", "unitball-d15"])
def test_oracle_dominance_on_bundled_fixtures(fixture):
    budget = 1200 if fixture == "unitball-d15" else 800
    cfg = SimConfig(
        env_ref=fixture,
        budgets=[budget],
        replications=100,
        master_seed=12,
        agents=[AgentSpec("oracle"), AgentSpec("speed"), AgentSpec("on-policy")],
    )
    report = mse_experiment(cfg)
    oracle = report.get("oracle", budget)
    for agent in ("speed", "on-policy"):
        cell = report.get(agent, budget)
        combined = math.sqrt(oracle.stderr**2 + cell.stderr**2)
        assert oracle.mse <= cell.mse + 2.0 * combined


def test_write_report_csv_layout(tmp_path):
    cfg = make_config(replications=5)
    report = mse_experiment(cfg)
    regret = empirical_regret(report)
    path = tmp_path / "report.csv"
    write_report_csv(path, report, regret)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "agent,n,mse,stderr,regret,slope"
    assert len(lines) == 1 + 2 * 2
    oracle_row = lines[1].split(",")
    assert oracle_row[0] == "oracle" and oracle_row[4] == "0"
