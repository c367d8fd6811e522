"""Monte Carlo harness: MSE-vs-budget experiments, empirical regret and
log-log slopes, the closed-form equivalence check, and the covariance
concentration probe.

Every replication draws from its own random stream, split from the master
seed by a counter-based key (agent index, budget index, replication index),
so reports are deterministic and independent of execution order or worker
count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import AgentSpec, OracleEnvironmentView, run_agent
from .design import allocate, pe_loss
from .estimators import wls_fit
from .model import Environment, TargetPolicy, load_environment, load_fixture, load_policy

REGRET_FLOOR = 1e-16

# Diagnostics averaged into reports; wall time is excluded so outputs stay
# byte-reproducible.
_REPORTED_DIAGNOSTICS = ("gamma", "gap", "iterations", "converged")


def split_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent stream for a (nested) counter key under one master seed."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


def resolve_environment(env_ref: str, policy_ref: str | None = None):
    """Resolve a bundled fixture name or an environment JSON path (the latter
    requires a policy JSON path)."""
    if Path(env_ref).suffix == ".json" or Path(env_ref).exists():
        env = load_environment(env_ref)
        if policy_ref is None:
            raise ValueError("environment files require a policy file reference")
        return env, load_policy(policy_ref)
    return load_fixture(env_ref)


@dataclass
class SimConfig:
    env_ref: str
    budgets: list[int]
    replications: int
    master_seed: int
    agents: list[AgentSpec]
    policy_ref: str | None = None
    workers: int = 1
    regret: bool | None = None

    def __post_init__(self):
        self.budgets = [int(n) for n in self.budgets]
        if not self.budgets or any(b >= a for b, a in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be a nonempty strictly increasing list")
        if self.replications < 2:
            raise ValueError("need at least 2 replications")
        if not self.agents:
            raise ValueError("need at least one agent")
        kinds = [spec.kind for spec in self.agents]
        if len(set(kinds)) != len(kinds):
            raise ValueError("agent kinds must be unique within a run")
        if self.regret and "oracle" not in kinds:
            raise ValueError("regret was requested but no oracle agent is configured")

    @property
    def compute_regret(self) -> bool:
        if self.regret is None:
            return any(spec.kind == "oracle" for spec in self.agents)
        return self.regret

    @classmethod
    def from_dict(cls, payload: dict) -> "SimConfig":
        agents = [
            AgentSpec(kind=item["kind"], options=item.get("options", {}))
            for item in payload["agents"]
        ]
        return cls(
            env_ref=payload["env"],
            budgets=list(payload["budgets"]),
            replications=int(payload["replications"]),
            master_seed=int(payload["master_seed"]),
            agents=agents,
            policy_ref=payload.get("policy"),
            workers=int(payload.get("workers", 1)),
            regret=payload.get("regret"),
        )

    def to_dict(self) -> dict:
        return {
            "env": self.env_ref,
            "policy": self.policy_ref,
            "budgets": self.budgets,
            "replications": self.replications,
            "master_seed": self.master_seed,
            "agents": [{"kind": s.kind, "options": dict(s.options)} for s in self.agents],
            "workers": self.workers,
            "regret": self.regret,
        }


@dataclass
class MseCell:
    agent: str
    n: int
    mse: float
    stderr: float
    values: np.ndarray
    diagnostics: dict
    error: str | None = None


@dataclass
class MseReport:
    true_value: float
    replications: int
    cells: list[MseCell] = field(default_factory=list)

    def get(self, agent: str, n: int) -> MseCell:
        for cell in self.cells:
            if cell.agent == agent and cell.n == n:
                return cell
        raise KeyError(f"no cell for agent {agent!r} at budget {n}")

    @property
    def agent_names(self) -> list[str]:
        seen: list[str] = []
        for cell in self.cells:
            if cell.agent not in seen:
                seen.append(cell.agent)
        return seen

    @property
    def budgets(self) -> list[int]:
        seen: list[int] = []
        for cell in self.cells:
            if cell.n not in seen:
                seen.append(cell.n)
        return seen

    @property
    def has_errors(self) -> bool:
        return any(cell.error is not None for cell in self.cells)


def _run_cell(args) -> MseCell:
    env, pi, spec, n, master_seed, agent_index, budget_index, replications, true_value = args
    values = np.empty(replications)
    diagnostics_sum: dict = {}
    try:
        for r in range(replications):
            rng = split_rng(master_seed, agent_index, budget_index, r)
            result = run_agent(spec, env, pi, n, rng)
            values[r] = result.value_estimate
            for key in _REPORTED_DIAGNOSTICS:
                if key in result.diagnostics:
                    diagnostics_sum[key] = diagnostics_sum.get(key, 0.0) + float(
                        result.diagnostics[key]
                    )
    except Exception as exc:  # noqa: BLE001 - cell failures are recorded, not fatal
        return MseCell(
            agent=spec.kind, n=n, mse=math.nan, stderr=math.nan,
            values=np.full(replications, math.nan), diagnostics={}, error=str(exc),
        )
    squared_errors = (values - true_value) ** 2
    diagnostics = {key: total / replications for key, total in diagnostics_sum.items()}
    return MseCell(
        agent=spec.kind,
        n=n,
        mse=float(squared_errors.mean()),
        stderr=float(squared_errors.std(ddof=1) / math.sqrt(replications)),
        values=values,
        diagnostics=diagnostics,
    )


def mse_experiment(cfg: SimConfig, env: Environment | None = None, pi: TargetPolicy | None = None) -> MseReport:
    """Per-(agent, budget) Monte Carlo mean squared error of the value estimate."""
    if env is None or pi is None:
        env, pi = resolve_environment(cfg.env_ref, cfg.policy_ref)
    true_value = env.true_value(pi)
    tasks = [
        (env, pi, spec, n, cfg.master_seed, i, j, cfg.replications, true_value)
        for i, spec in enumerate(cfg.agents)
        for j, n in enumerate(cfg.budgets)
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(task) for task in tasks]
    return MseReport(true_value=true_value, replications=cfg.replications, cells=cells)


@dataclass
class RegretRow:
    agent: str
    n: int
    regret: float


@dataclass
class RegretReport:
    rows: list[RegretRow]
    slopes: dict

    def get(self, agent: str, n: int) -> float:
        for row in self.rows:
            if row.agent == agent and row.n == n:
                return row.regret
        raise KeyError(f"no regret row for agent {agent!r} at budget {n}")


def fit_loglog_slope(budgets, regrets, floor: float = REGRET_FLOOR) -> float:
    """Least-squares slope of log regret against log budget, flooring
    nonpositive regrets (a difference of noisy estimates can dip below zero)."""
    x = np.log(np.asarray(budgets, dtype=float))
    y = np.log(np.maximum(np.asarray(regrets, dtype=float), floor))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def empirical_regret(report: MseReport, oracle_key: str = "oracle") -> RegretReport:
    """Per-budget excess MSE over the oracle, with a fitted log-log slope per agent."""
    budgets = report.budgets
    oracle_mse = {}
    for n in budgets:
        try:
            cell = report.get(oracle_key, n)
        except KeyError:
            raise ValueError(f"oracle agent {oracle_key!r} missing at budget {n}") from None
        if cell.error is not None:
            raise ValueError(f"oracle cell at budget {n} failed: {cell.error}")
        oracle_mse[n] = cell.mse

    rows: list[RegretRow] = []
    slopes: dict = {}
    for agent in report.agent_names:
        regrets = []
        for n in budgets:
            cell = report.get(agent, n)
            regret = 0.0 if agent == oracle_key else cell.mse - oracle_mse[n]
            rows.append(RegretRow(agent=agent, n=n, regret=regret))
            regrets.append(regret)
        if agent == oracle_key:
            slopes[agent] = math.nan
        else:
            slopes[agent] = fit_loglog_slope(budgets, regrets)
    return RegretReport(rows=rows, slopes=slopes)


def concentration_probe(
    env: Environment,
    gammas: list[int],
    replications: int,
    seed: int,
) -> list[dict]:
    """Distribution of the worst per-action error of the covariance fit after
    a forced-exploration phase, for each exploration length."""
    from .agents import explore_covariance, seal

    view = seal(env)
    true_variances = env.variances()
    rows = []
    for g_index, gamma in enumerate(gammas):
        if gamma < env.dim:
            raise ValueError(f"exploration length {gamma} is below the dimension {env.dim}")
        errors = np.empty(replications)
        for r in range(replications):
            rng = split_rng(seed, g_index, r)
            _, _, _, sigma_hat, _ = explore_covariance(view, int(gamma), rng)
            fitted = np.einsum("ad,de,ae->a", env.features, sigma_hat, env.features)
            errors[r] = float(np.max(np.abs(fitted - true_variances)))
        rows.append(
            {
                "gamma": int(gamma),
                "mean_error": float(errors.mean()),
                "q90_error": float(np.quantile(errors, 0.9)),
            }
        )
    return rows


def closed_form_vs_mc(
    env: Environment,
    pi: TargetPolicy,
    b,
    n: int,
    replications: int,
    seed: int,
) -> tuple[float, float, float]:
    """Compare the analytic loss of a design against the Monte Carlo MSE of
    the variance-weighted least-squares estimate under that allocation."""
    variances = env.variances()
    closed = pe_loss(pi, b, variances, env.features, n)
    counts = allocate(b, n)
    actions = np.repeat(np.arange(env.n_actions), counts)
    features_obs = env.features[actions]
    row_variances = variances[actions]
    view = OracleEnvironmentView(env)
    true_value = env.true_value(pi)

    squared_errors = np.empty(replications)
    for r in range(replications):
        rng = split_rng(seed, r)
        rewards = np.empty(actions.shape[0])
        offset = 0
        for action, count in enumerate(counts):
            if count == 0:
                continue
            rewards[offset : offset + count] = view.sample_rewards(int(action), int(count), rng)
            offset += count
        theta = wls_fit(features_obs, rewards, row_variances)
        estimate = float(pi.probs @ (env.features @ theta))
        squared_errors[r] = (estimate - true_value) ** 2
    mc = float(squared_errors.mean())
    rel_err = abs(closed - mc) / closed if closed > 0 else math.inf
    return closed, mc, rel_err


def write_report_csv(
    path: str | Path,
    report: MseReport,
    regret: RegretReport | None = None,
) -> None:
    """Serialize a report: one row per (agent, budget), slope repeated per agent."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["agent", "n", "mse", "stderr", "regret", "slope"])
        for agent in report.agent_names:
            for n in report.budgets:
                cell = report.get(agent, n)
                if cell.error is not None:
                    row = [agent, n, "", "", "", ""]
                else:
                    regret_value = ""
                    slope_value = ""
                    if regret is not None:
                        regret_value = f"{regret.get(agent, n):.17g}"
                        slope = regret.slopes.get(agent, math.nan)
                        slope_value = "" if math.isnan(slope) else f"{slope:.17g}"
                    row = [
                        agent,
                        n,
                        f"{cell.mse:.17g}",
                        f"{cell.stderr:.17g}",
                        regret_value,
                        slope_value,
                    ]
                writer.writerow(row)
