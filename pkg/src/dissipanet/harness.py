"""Training and evaluation driver for shielded episodic RL on the network.

Episodes run the loop: sample an initial state near the operating point,
roll the coupled network forward for a fixed horizon while each node's RL
action is corrected by its shield, store deployed transitions, then let every
learner do its policy iteration at the episode boundary (observe() never
changes the acting policy mid-episode).  Barriers and pending feedforward
data reset at episode boundaries; learner state persists.

The per-node control path reads only that node's state, coupling input, and
barrier, so nodes exchange nothing beyond the wired port signals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import netmodel
from .dissipativity import (
    SPECTRAL_TOL,
    STRUCTURAL_TOL,
    cross_weight_residual,
    interconnection_margins,
    network_supply_bound,
)
from .microgrid import ShiftedDguNode, load_step_bias, reward
from .netmodel import NetworkState, network_step
from .rl import Transition, make_learner
from .shield import FeedforwardStore, InfeasibleConstraint, NodeShield


class AssumptionError(RuntimeError):
    """A structural interconnection check failed before training started."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"interconnection checks failed: {report}")


def interconnection_report(topo, supplies, shield_cfgs):
    """Residual and margin eigenvalues for the structural pre-checks."""
    alpha = min(c.delta_d for c in shield_cfgs)
    beta = min(c.epsilon_d for c in shield_cfgs)
    residual = cross_weight_residual(topo, supplies.s_nu_stacked(), supplies.s_e_stacked())
    lmin_delta, lmin_eps = interconnection_margins(
        topo, supplies.eps_e, supplies.delta_e, alpha, beta)
    return {
        "cross_weight_residual": residual,
        "lambda_min_b_delta": lmin_delta,
        "lambda_min_b_eps": lmin_eps,
        "alpha": alpha,
        "beta": beta,
        "residual_ok": residual <= STRUCTURAL_TOL,
        "margins_ok": lmin_delta >= -SPECTRAL_TOL and lmin_eps >= -SPECTRAL_TOL,
        "strict_margins": lmin_delta > SPECTRAL_TOL and lmin_eps > SPECTRAL_TOL,
    }


@dataclass(frozen=True)
class Scenario:
    """Disturbance schedule: nothing, or a one-shot load change."""

    kind: str = "nominal"
    time_s: float = 0.0
    fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nominal", "load_step"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    def step_index(self, t_s):
        if self.kind != "load_step":
            return None
        return int(round(self.time_s / t_s))


@dataclass(frozen=True)
class RunConfig:
    episodes: int = 200
    horizon: int = 2000
    seed: int = 7
    init_std_frac: float = 0.01
    shield_enabled: bool = True
    scenario: Scenario = Scenario()
    eval_horizon: int = 10_000
    eval_scenario: Scenario = Scenario(kind="load_step", time_s=0.05, fraction=0.05)
    band_frac: float = 0.01

    def __post_init__(self):
        if self.episodes < 1 or self.horizon < 1:
            raise ValueError("episodes and horizon must be >= 1")
        if self.init_std_frac < 0.0:
            raise ValueError("init_std_frac must be >= 0")


@dataclass
class Setup:
    """Everything a rollout needs, already constructed."""

    topo: object
    nodes: list
    edges: list
    eq: object
    supplies: object
    shield_cfgs: list
    reward_ks: list
    learner_kinds: list
    ddpg_cfg: object = None
    cem_cfg: object = None
    ff_mode: str = "knn"
    ff_k: int = 5
    ff_ridge_lambda: float = 1e-3
    ff_capacity: int = 4096
    run: RunConfig = field(default_factory=RunConfig)
    dgu_params: list | None = None
    line_params: list | None = None

    @property
    def t_s(self):
        return self.dgu_params[0].t_s if self.dgu_params else self.nodes[0].params.t_s

    def make_learners(self, seed_seq):
        seeds = seed_seq.spawn(len(self.nodes))
        out = []
        for i, kind in enumerate(self.learner_kinds):
            node = self.nodes[i]
            out.append(make_learner(kind, node.state_dim, node.u_volts_min,
                                    node.u_volts_max, seeds[i],
                                    ddpg_cfg=self.ddpg_cfg, cem_cfg=self.cem_cfg))
        return out

    def make_shields(self):
        out = []
        for i in range(len(self.nodes)):
            store = FeedforwardStore(self.nodes[i].state_dim, self.nodes[i].control_dim,
                                     mode=self.ff_mode, k=self.ff_k,
                                     ridge_lambda=self.ff_ridge_lambda,
                                     capacity=self.ff_capacity)
            out.append(NodeShield(i, self.supplies.node_control[i],
                                  self.supplies.node_coupling[i],
                                  self.shield_cfgs[i], store))
        return out


NODE_FIELDS = ("i", "v", "u_rl", "u_ff", "u_cbf", "u_dec", "nu", "y_u", "y_nu",
               "b", "w_n", "w_d", "w_tilde", "r")
EDGE_FIELDS = ("i_line", "mu", "omega", "w_e")


class EpisodeLog:
    """Column-complete per-step record of one episode."""

    def __init__(self, horizon, n_nodes, n_edges, v_ref, t_s, episode=0):
        self.horizon = horizon
        self.n_nodes = n_nodes
        self.n_edges = n_edges
        self.v_ref = np.asarray(v_ref, float)
        self.t_s = t_s
        self.episode = episode
        self.node = {f: np.zeros((horizon, n_nodes)) for f in NODE_FIELDS}
        self.edge = {f: np.zeros((horizon, n_edges)) for f in EDGE_FIELDS}
        self.returns = np.zeros(n_nodes)
        self.final_b = np.zeros(n_nodes)
        self.tainted = False
        self.taint_steps = []
        self.consistency_max_err = 0.0

    def io_records(self):
        """Rebuild the per-step port tuples for supply-bound checking."""
        records = []
        for t in range(self.horizon):
            records.append(netmodel.IoRecord(
                u=tuple(np.array([self.node["u_dec"][t, i]]) for i in range(self.n_nodes)),
                nu=tuple(np.array([self.node["nu"][t, i]]) for i in range(self.n_nodes)),
                y_u=tuple(np.array([self.node["y_u"][t, i]]) for i in range(self.n_nodes)),
                y_nu=tuple(np.array([self.node["y_nu"][t, i]]) for i in range(self.n_nodes)),
                mu=tuple(np.array([self.edge["mu"][t, k]]) for k in range(self.n_edges)),
                omega=tuple(np.array([self.edge["omega"][t, k]]) for k in range(self.n_edges)),
            ))
        return records

    def column_names(self):
        cols = ["t"]
        for i in range(self.n_nodes):
            cols.extend(f"n{i}_{f}" for f in NODE_FIELDS)
            cols.append(f"n{i}_v_abs")
        for k in range(self.n_edges):
            cols.extend(f"e{k}_{f}" for f in EDGE_FIELDS)
        return cols

    def rows(self):
        for t in range(self.horizon):
            row = [float(t)]
            for i in range(self.n_nodes):
                row.extend(self.node[f][t, i] for f in NODE_FIELDS)
                row.append(self.node["v"][t, i] + self.v_ref[i])
            for k in range(self.n_edges):
                row.extend(self.edge[f][t, k] for f in EDGE_FIELDS)
            yield row


@dataclass(frozen=True)
class EpisodeSummary:
    """Aggregates the acceptance checks need, without the full trace."""

    episode: int
    returns: np.ndarray
    min_barrier: np.ndarray          # over logged steps and the final value
    min_wd_prefix: np.ndarray        # per node: min_t sum_{tau<=t} w_d
    min_wn_prefix: np.ndarray
    tainted: bool
    consistency_max_err: float


def _sample_initial_state(setup, rng, std_frac):
    eq = setup.eq
    n, m = setup.topo.n_nodes, setup.topo.n_edges
    x = []
    for i in range(n):
        std_i = std_frac * max(abs(eq.i_node[i]), 1.0)
        std_v = std_frac * abs(eq.v_node[i])
        x.append(np.array([rng.normal(0.0, std_i) if std_frac > 0 else 0.0,
                           rng.normal(0.0, std_v) if std_frac > 0 else 0.0]))
    z = []
    for k in range(m):
        std_z = std_frac * max(abs(eq.i_line[k]), 1.0)
        z.append(np.array([rng.normal(0.0, std_z) if std_frac > 0 else 0.0]))
    return NetworkState(x=tuple(x), z=tuple(z), t=0)


def _apply_load_step(setup, nodes, fraction):
    """Swap node dynamics for the post-step load, keeping the old coordinates."""
    new_nodes = []
    for i, node in enumerate(nodes):
        params = replace(setup.dgu_params[i], g=setup.dgu_params[i].g * (1.0 + fraction))
        new_nodes.append(ShiftedDguNode(params, node.u_eq_duty,
                                        bias_v=load_step_bias(params, setup.eq, i)))
    return new_nodes


def _scalar_supply(spec):
    return float(spec.s[0, 0]), float(spec.r[0, 0]), float(spec.q[0, 0])


def rollout_episode(setup, learners, shields, horizon, rng, explore, scenario,
                    episode_index=0, collect_log=True):
    """One closed-loop episode.  Returns (EpisodeLog or None, EpisodeSummary)."""
    run = setup.run
    n, m = setup.topo.n_nodes, setup.topo.n_edges
    t_s = setup.t_s
    nodes = list(setup.nodes)
    edges = setup.edges
    step_at = scenario.step_index(t_s)

    std = run.init_std_frac if explore else 0.0
    state = _sample_initial_state(setup, rng, std)

    log = EpisodeLog(horizon, n, m, setup.eq.v_node, t_s, episode_index) if collect_log else None
    returns = np.zeros(n)
    min_barrier = np.zeros(n)
    wd_cum = np.zeros(n)
    wn_cum = np.zeros(n)
    min_wd = np.zeros(n)
    min_wn = np.zeros(n)
    tainted = False
    taint_steps = []
    consistency = 0.0

    su = [_scalar_supply(setup.supplies.node_control[i]) for i in range(n)]
    sn = [_scalar_supply(setup.supplies.node_coupling[i]) for i in range(n)]
    se = [_scalar_supply(setup.supplies.edge[k]) for k in range(m)]

    for t in range(horizon):
        if step_at is not None and t == step_at:
            nodes = _apply_load_step(setup, nodes, scenario.fraction)

        ports = netmodel.network_ports(state, nodes, edges, setup.topo)
        y_u, y_nu, mu, omega, nu = ports

        u = []
        for i in range(n):
            obs = state.x[i]
            u_rl = learners[i].act(obs, explore=explore)
            if shields[i] is not None:
                try:
                    act = shields[i].control(obs, nu[i], y_u[i], y_nu[i], u_rl)
                except InfeasibleConstraint:
                    act = shields[i].fallback(obs, nu[i], y_u[i], y_nu[i], u_rl)
                    tainted = True
                    taint_steps.append((t, i))
                b_before = act.b_before
                u_ff, u_cbf, u_dec = act.u_ff, act.u_cbf, act.u_dec
                w_tilde_used = act.w_tilde
            else:
                b_before = 0.0
                u_ff = u_rl
                u_cbf = np.zeros_like(u_rl)
                u_dec = u_rl
                w_tilde_used = None
            u.append(u_dec)

            s_u, r_u, q_u = su[i]
            s_n, r_n, q_n = sn[i]
            uv = float(u_dec[0])
            yui = float(y_u[i][0])
            yni = float(y_nu[i][0])
            nui = float(nu[i][0])
            w_u_val = uv * s_u * yui - r_u * uv * uv - q_u * yui * yui
            w_nu_val = nui * s_n * yni - r_n * nui * nui - q_n * yni * yni
            w_n_val = w_u_val + w_nu_val
            cfg = setup.shield_cfgs[i]
            w_d_val = (nui * s_n * yni - cfg.delta_d * nui * nui
                       - cfg.epsilon_d * (yui * yui + yni * yni))
            w_tilde_raw = w_n_val - w_d_val
            if w_tilde_used is not None:
                consistency = max(consistency, abs(w_tilde_raw - w_tilde_used))
            wd_cum[i] += w_d_val
            wn_cum[i] += w_n_val
            min_wd[i] = min(min_wd[i], wd_cum[i])
            min_wn[i] = min(min_wn[i], wn_cum[i])
            min_barrier[i] = min(min_barrier[i], b_before)

            if collect_log:
                nd = log.node
                nd["i"][t, i] = state.x[i][0]
                nd["v"][t, i] = state.x[i][1]
                nd["u_rl"][t, i] = u_rl[0]
                nd["u_ff"][t, i] = u_ff[0]
                nd["u_cbf"][t, i] = u_cbf[0]
                nd["u_dec"][t, i] = u_dec[0]
                nd["nu"][t, i] = nui
                nd["y_u"][t, i] = yui
                nd["y_nu"][t, i] = yni
                nd["b"][t, i] = b_before
                nd["w_n"][t, i] = w_n_val
                nd["w_d"][t, i] = w_d_val
                nd["w_tilde"][t, i] = w_tilde_raw

        next_state, io = network_step(state, u, nodes, edges, setup.topo, ports=ports)

        for k in range(m):
            s_e, r_e, q_e = se[k]
            mk = float(mu[k][0])
            ok = float(omega[k][0])
            if collect_log:
                log.edge["i_line"][t, k] = state.z[k][0]
                log.edge["mu"][t, k] = mk
                log.edge["omega"][t, k] = ok
                log.edge["w_e"][t, k] = mk * s_e * ok - r_e * mk * mk - q_e * ok * ok

        done = t == horizon - 1
        for i in range(n):
            r_i = reward(next_state.x[i][1] + setup.eq.v_node[i], setup.eq.v_node[i],
                         setup.reward_ks[i])
            returns[i] += r_i
            if collect_log:
                log.node["r"][t, i] = r_i
            learners[i].observe(Transition(x=state.x[i].copy(), u=u[i].copy(),
                                           x_next=next_state.x[i].copy(), r=r_i, done=done))
        state = next_state

    for i in range(n):
        b_final = shields[i].barrier.b if shields[i] is not None else 0.0
        min_barrier[i] = min(min_barrier[i], b_final)
        if collect_log:
            log.final_b[i] = b_final

    if collect_log:
        log.returns = returns
        log.tainted = tainted
        log.taint_steps = taint_steps
        log.consistency_max_err = consistency
    summary = EpisodeSummary(episode=episode_index, returns=returns,
                             min_barrier=min_barrier, min_wd_prefix=min_wd,
                             min_wn_prefix=min_wn, tainted=tainted,
                             consistency_max_err=consistency)
    return log, summary


@dataclass
class TrainingResult:
    learners: list
    returns: np.ndarray          # (episodes, n_nodes)
    summaries: list
    logs: list                   # the episodes log_every selected, last included
    last_log: EpisodeLog
    tainted_fraction: float
    report: dict


def run_training(setup, log_every=0, progress=None):
    """Execute the full episodic shielded training loop.

    Structural checks run before episode 0 and abort with AssumptionError on
    failure.  Episode 0 acts with the initial policies and an empty
    feedforward store; from episode 1 on, every learner does its policy
    iteration and every store refits at the boundary before the next rollout.
    Infeasible projection steps deploy the least-violating boxed action and
    taint the episode, which is then excluded from certification statistics.
    Full traces are kept for the last episode and, when log_every > 0, every
    log_every-th episode; summaries are kept for all.
    """
    run = setup.run
    report = interconnection_report(setup.topo, setup.supplies, setup.shield_cfgs)
    if not (report["residual_ok"] and report["margins_ok"]):
        raise AssumptionError(report)

    seed_seq = np.random.SeedSequence(run.seed)
    sim_seq, learner_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(sim_seq)
    learners = setup.make_learners(learner_seq)
    shields = setup.make_shields() if run.shield_enabled else [None] * len(setup.nodes)

    returns = np.zeros((run.episodes, setup.topo.n_nodes))
    summaries = []
    logs = []
    last_log = None
    n_tainted = 0
    for ep in range(run.episodes):
        want_log = ep == run.episodes - 1 or (log_every > 0 and ep % log_every == 0)
        log, summary = rollout_episode(setup, learners, shields, run.horizon, rng,
                                       explore=True, scenario=run.scenario,
                                       episode_index=ep, collect_log=want_log)
        returns[ep] = summary.returns
        summaries.append(summary)
        n_tainted += int(summary.tainted)
        if want_log:
            last_log = log
            logs.append(log)
        for i, lrn in enumerate(learners):
            lrn.end_episode(float(summary.returns[i]))
        for sh in shields:
            if sh is not None:
                sh.reset_episode()
        if progress is not None:
            progress(ep, summary)

    return TrainingResult(learners=learners, returns=returns, summaries=summaries,
                          logs=logs, last_log=last_log,
                          tainted_fraction=n_tainted / run.episodes, report=report)


def _band_entry_time(v_dev, band, start, end):
    """First step in [start, end) from which |v_dev| stays inside the band."""
    inside = np.all(np.abs(v_dev[start:end]) < band, axis=1)
    if not inside.any():
        return None
    # last violation before the window stays clean
    bad = np.flatnonzero(~inside)
    if bad.size == 0:
        return start
    last_bad = bad[-1]
    if last_bad == inside.size - 1:
        return None
    return start + last_bad + 1


def run_evaluation(setup, learners, scenario=None, horizon=None, shield_enabled=True):
    """Deterministic rollout of trained policies with metrics.

    Exploration and initial-state noise are disabled.  Returns (EpisodeLog,
    metrics dict); the metrics include the cumulative network supply-bound
    check over the realized trajectory.
    """
    run = setup.run
    scenario = scenario if scenario is not None else run.eval_scenario
    horizon = horizon or run.eval_horizon
    rng = np.random.default_rng(0)  # unused when std == 0, kept for signature symmetry
    shields = setup.make_shields() if shield_enabled else [None] * len(setup.nodes)
    log, summary = rollout_episode(setup, learners, shields, horizon, rng,
                                   explore=False, scenario=scenario,
                                   episode_index=0, collect_log=True)

    t_s = setup.t_s
    v_dev = log.node["v"]
    band = run.band_frac * np.asarray(setup.eq.v_node)
    step_at = scenario.step_index(t_s)
    pre_end = step_at if step_at is not None else horizon

    settle = _band_entry_time(v_dev, band, 0, pre_end)
    recovery = None
    if step_at is not None:
        rec = _band_entry_time(v_dev, band, step_at, horizon)
        recovery = None if rec is None else (rec - step_at) * t_s

    bound = network_supply_bound(log.io_records(), setup.supplies, setup.shield_cfgs,
                                 setup.topo)
    metrics = {
        "settling_time_s": None if settle is None else settle * t_s,
        "max_abs_v_dev": float(np.abs(v_dev).max()),
        "max_abs_v_dev_frac": float((np.abs(v_dev) / np.asarray(setup.eq.v_node)).max()),
        "recovery_time_s": recovery,
        "min_barrier": float(summary.min_barrier.min()),
        "supply_bound_ok": bool(bound.ok),
        "supply_bound_margin": float(bound.max_violation),
        "supply_lhs_max": float(bound.lhs.max()) if bound.lhs.size else 0.0,
        "tainted": bool(summary.tainted),
        "load_step_index": step_at,
        "episode_return_total": float(summary.returns.sum()),
    }
    return log, metrics
