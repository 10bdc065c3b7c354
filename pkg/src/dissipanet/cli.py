"""Command-line entry point: train / evaluate / check-assumptions / project.

One JSON document configures a run, with sections {network, microgrid,
shield, learners, run}; every field has a default and unknown keys are
rejected.  Outputs per run: episode_returns.csv, trajectory CSVs, a policy
checkpoint, metrics.json, and a manifest recording the config hash, seed and
code version.  Floats in CSVs print with 17 significant digits so equal runs
produce byte-identical files.

Exit codes: 0 success, 1 usage/config error, 2 interconnection check failed,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import tempfile
import time
from importlib import resources

import numpy as np

from . import __version__
from .dissipativity import SPECTRAL_TOL, STRUCTURAL_TOL
from .harness import (
    AssumptionError,
    RunConfig,
    Scenario,
    Setup,
    interconnection_report,
    run_evaluation,
    run_training,
)
from .microgrid import DguParams, LineParams, RewardParams, build_microgrid
from .netmodel import NetworkTopology, NumericalDivergenceError
from .rl import CemConfig, DdpgLiteConfig, load_checkpoint, save_checkpoint
from .shield import DissipConstraint, InfeasibleConstraint, ShieldConfig, project

DEFAULT_CONFIG = {
    "network": {
        "topology": "ring",
        "nodes": 4,
    },
    "microgrid": {
        "t_s": 1e-5,
        "r": [0.10, 0.08, 0.12, 0.06],
        "l": [1.8e-3, 2.0e-3, 3.0e-3, 2.2e-3],
        "c": [2.2e-3, 1.9e-3, 1.7e-3, 2.5e-3],
        "g": [0.20, 0.15, 0.25, 0.10],
        "v_s": [100.0, 100.0, 100.0, 100.0],
        "r_line": [0.07, 0.05, 0.08, 0.06],
        "l_line": [2.1e-6, 2.3e-6, 2.0e-6, 1.8e-6],
        "v_ref": [48.0, 48.0, 48.0, 48.0],
        "reward_k": [1.0, 1.0, 1.0, 1.0],
    },
    "shield": {
        "enabled": True,
        "eta": 0.1,
        "delta_d": 0.0,
        "epsilon_d": None,
        "duty_margin": 1e-6,
        "feedforward": {"mode": "knn", "k": 5, "ridge_lambda": 1e-3, "capacity": 4096},
    },
    "learners": {
        "default": "ddpg",
        "assignments": {},
        "ddpg": {
            "gamma": 0.99,
            "hidden": [32, 32],
            "lr_actor": 1e-3,
            "lr_critic": 1e-3,
            "tau": 0.01,
            "buffer_capacity": 100000,
            "batch_size": 64,
            "noise_frac": 0.1,
            "updates_per_episode": 250,
            "actor_center_reg": 1.5,
        },
        "cem": {"population": 16, "elite_frac": 0.25, "init_std": 1.0},
    },
    "run": {
        "episodes": 200,
        "horizon": 2000,
        "seed": 7,
        "init_std_frac": 0.01,
        "scenario": {"kind": "nominal", "time_s": 0.0, "fraction": 0.0},
        "eval_horizon": 10000,
        "eval_scenario": {"kind": "load_step", "time_s": 0.05, "fraction": 0.05},
        "band_frac": 0.01,
        "log_every": 0,
    },
}

FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    pass


def _merge_validate(template, override, path=""):
    """Defaults overridden by user values; unknown keys rejected with their path."""
    if not isinstance(override, dict):
        raise ConfigError(f"section {path or '<root>'} must be an object")
    merged = copy.deepcopy(template)
    free_form = path in ("learners.assignments",)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if not free_form and key not in template:
            raise ConfigError(f"unknown config key: {where}")
        if not free_form and isinstance(template.get(key), dict) and template.get(key):
            merged[key] = _merge_validate(template[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None, overrides=None):
    """Read a config file (or the bundled default) and apply CLI overrides."""
    if path is None:
        raw = json.loads(resources.files("dissipanet")
                         .joinpath("data/microgrid_ring.json").read_text())
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"malformed config {path}: line {err.lineno}, column {err.colno}: {err.msg}")
    cfg = _merge_validate(DEFAULT_CONFIG, raw)
    for dotted, value in (overrides or {}).items():
        section = cfg
        keys = dotted.split(".")
        for k in keys[:-1]:
            section = section[k]
        section[keys[-1]] = value
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _scenario_from(cfg_section):
    return Scenario(kind=cfg_section["kind"], time_s=cfg_section.get("time_s", 0.0),
                    fraction=cfg_section.get("fraction", 0.0))


def build_setup(cfg):
    """Translate a validated config document into a harness Setup."""
    net = cfg["network"]
    mg = cfg["microgrid"]
    n = int(net["nodes"])
    if net["topology"] != "ring":
        raise ConfigError(f"unsupported topology {net['topology']!r}")
    topo = NetworkTopology.ring(n)
    lengths = {name: len(mg[name]) for name in ("r", "l", "c", "g", "v_s", "v_ref", "reward_k")}
    for name, ln in lengths.items():
        if ln != n:
            raise ConfigError(f"microgrid.{name} must have {n} entries, has {ln}")
    for name in ("r_line", "l_line"):
        if len(mg[name]) != topo.n_edges:
            raise ConfigError(f"microgrid.{name} must have {topo.n_edges} entries")

    t_s = float(mg["t_s"])
    dgu_params = [DguParams(r=mg["r"][i], l=mg["l"][i], c=mg["c"][i], g=mg["g"][i],
                            v_s=mg["v_s"][i], t_s=t_s) for i in range(n)]
    line_params = [LineParams(r_l=mg["r_line"][k], l_l=mg["l_line"][k], t_s=t_s)
                   for k in range(topo.n_edges)]
    topo, nodes, edges, eq, supplies = build_microgrid(dgu_params, line_params,
                                                       v_ref=np.asarray(mg["v_ref"], float),
                                                       topo=topo)

    sh = cfg["shield"]
    margin = float(sh["duty_margin"])
    shield_cfgs = []
    for i in range(n):
        eps_d = sh["epsilon_d"]
        eps_d_i = dgu_params[i].r if eps_d is None else (
            eps_d[i] if isinstance(eps_d, list) else float(eps_d))
        delta = sh["delta_d"]
        delta_i = delta[i] if isinstance(delta, list) else float(delta)
        eta = sh["eta"]
        eta_i = eta[i] if isinstance(eta, list) else float(eta)
        u_lo = (margin - eq.u_duty[i]) * dgu_params[i].v_s
        u_hi = (1.0 - margin - eq.u_duty[i]) * dgu_params[i].v_s
        shield_cfgs.append(ShieldConfig(delta_d=delta_i, epsilon_d=eps_d_i, eta=eta_i,
                                        u_min=u_lo, u_max=u_hi))

    lc = cfg["learners"]
    kinds = [lc["assignments"].get(str(i), lc["default"]) for i in range(n)]
    ddpg_cfg = DdpgLiteConfig(
        gamma=lc["ddpg"]["gamma"], hidden=tuple(lc["ddpg"]["hidden"]),
        lr_actor=lc["ddpg"]["lr_actor"], lr_critic=lc["ddpg"]["lr_critic"],
        tau=lc["ddpg"]["tau"], buffer_capacity=int(lc["ddpg"]["buffer_capacity"]),
        batch_size=int(lc["ddpg"]["batch_size"]), noise_frac=lc["ddpg"]["noise_frac"],
        updates_per_episode=int(lc["ddpg"]["updates_per_episode"]),
        actor_center_reg=float(lc["ddpg"]["actor_center_reg"]))
    cem_cfg = CemConfig(population=int(lc["cem"]["population"]),
                        elite_frac=lc["cem"]["elite_frac"],
                        init_std=lc["cem"]["init_std"])

    rc = cfg["run"]
    run = RunConfig(episodes=int(rc["episodes"]), horizon=int(rc["horizon"]),
                    seed=int(rc["seed"]), init_std_frac=float(rc["init_std_frac"]),
                    shield_enabled=bool(sh["enabled"]),
                    scenario=_scenario_from(rc["scenario"]),
                    eval_horizon=int(rc["eval_horizon"]),
                    eval_scenario=_scenario_from(rc["eval_scenario"]),
                    band_frac=float(rc["band_frac"]))

    ff = sh["feedforward"]
    reward_ks = [RewardParams(k=float(k)).k for k in mg["reward_k"]]
    return Setup(topo=topo, nodes=nodes, edges=edges, eq=eq, supplies=supplies,
                 shield_cfgs=shield_cfgs, reward_ks=reward_ks,
                 learner_kinds=kinds, ddpg_cfg=ddpg_cfg, cem_cfg=cem_cfg,
                 ff_mode=ff["mode"], ff_k=int(ff["k"]),
                 ff_ridge_lambda=float(ff["ridge_lambda"]),
                 ff_capacity=int(ff["capacity"]), run=run,
                 dgu_params=dgu_params, line_params=line_params)


def _atomic_write(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_dir, cfg, status, extra=None, base=None):
    """Atomically (re)write manifest.json; started_at survives finalization."""
    now = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg["run"]["seed"],
        "version": __version__,
        "status": status,
        "started_at": base["started_at"] if base else now,
        "out_dir": os.path.abspath(out_dir),
    }
    if base is not None:
        manifest["finished_at"] = now
    manifest.update(extra or {})
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))
    return manifest


def _fmt_row(values):
    return ",".join(FLOAT_FMT % v for v in values)


CSV_EOL = "\r\n"   # RFC-4180 line endings


def write_returns_csv(path, returns):
    episodes, n = returns.shape
    with open(path, "w", newline="") as fh:
        header = ",".join(["episode"] + [f"node{i}_return" for i in range(n)] + ["total"])
        fh.write(header + CSV_EOL)
        for ep in range(episodes):
            row = [float(ep)] + list(returns[ep]) + [float(returns[ep].sum())]
            fh.write(_fmt_row(row) + CSV_EOL)


def write_trajectory_csv(path, log):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(log.column_names()) + CSV_EOL)
        for row in log.rows():
            fh.write(_fmt_row(row) + CSV_EOL)


def _emit(args, payload, human):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, default=float))
    else:
        print(human)


def cmd_check(args):
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    report = interconnection_report(setup.topo, setup.supplies, setup.shield_cfgs)
    ok = report["residual_ok"] and report["margins_ok"]
    human = (
        f"cross-weight residual : {report['cross_weight_residual']:.3e}"
        f" (tol {STRUCTURAL_TOL:.0e}) {'PASS' if report['residual_ok'] else 'FAIL'}\n"
        f"lambda_min B_delta    : {report['lambda_min_b_delta']:.6g}"
        f" (alpha={report['alpha']:.6g})\n"
        f"lambda_min B_eps      : {report['lambda_min_b_eps']:.6g}"
        f" (beta={report['beta']:.6g})\n"
        f"margin tolerance      : {-SPECTRAL_TOL:.0e}"
        f" {'PASS' if report['margins_ok'] else 'FAIL'}\n"
        f"verdict               : {'PASS' if ok else 'FAIL'}"
    )
    _emit(args, {**report, "ok": ok}, human)
    return 0 if ok else 2


def cmd_project(args):
    constraint = DissipConstraint(r=np.array([[args.r]]), c=np.array([args.c]), k=args.K)
    box = tuple(args.box) if args.box else None
    try:
        u, a = project(constraint, np.array([args.u_ff]), box=box)
    except InfeasibleConstraint as err:
        _emit(args, {"infeasible": True, "detail": str(err)}, f"infeasible: {err}")
        return 1
    residual = constraint.evaluate(u)
    _emit(args, {"u": float(u[0]), "a": float(a[0]), "residual": residual},
          f"u = {u[0]:.12g}\na = {a[0]:.12g}\nresidual = {residual:.3e}")
    return 0


def _progress_printer(total):
    def cb(ep, summary):
        if (ep + 1) % max(1, total // 10) == 0:
            print(f"episode {ep + 1}/{total}  return {summary.returns.sum():.4g}"
                  f"  min_b {summary.min_barrier.min():.3e}", flush=True)
    return cb


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.episodes is not None:
        cfg["run"]["episodes"] = args.episodes
    if args.shield is not None:
        cfg["shield"]["enabled"] = args.shield == "on"
    setup = build_setup(cfg)

    os.makedirs(args.out, exist_ok=True)
    threads = int(os.environ.get("DISSIPANET_THREADS", "1"))
    manifest = write_manifest(args.out, cfg, "running", {"threads": threads})
    log_every = int(cfg["run"]["log_every"] or 0)
    try:
        result = run_training(setup, log_every=log_every,
                              progress=_progress_printer(setup.run.episodes)
                              if not args.quiet else None)
    except AssumptionError as err:
        print(f"interconnection checks failed: {err.report}", file=sys.stderr)
        write_manifest(args.out, cfg, "failed", {"error": "assumptions"}, base=manifest)
        return 2
    except NumericalDivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        write_manifest(args.out, cfg, "failed", {"error": str(err)}, base=manifest)
        return 3

    write_returns_csv(os.path.join(args.out, "episode_returns.csv"), result.returns)
    for log in result.logs:
        write_trajectory_csv(os.path.join(args.out, f"trajectory_{log.episode}.csv"), log)
    ckpt = os.path.join(args.out, "checkpoint.npz")
    save_checkpoint(ckpt, result.learners, extra_meta={"config_hash": config_hash(cfg)})
    summary = {
        "tainted_fraction": result.tainted_fraction,
        "min_barrier": float(min(s.min_barrier.min() for s in result.summaries)),
        "final_return_total": float(result.returns[-1].sum()),
        "episodes": setup.run.episodes,
    }
    _atomic_write(os.path.join(args.out, "metrics.json"), json.dumps(summary, indent=2))
    write_manifest(args.out, cfg, "complete",
                   {"outputs": sorted(os.listdir(args.out)), "log_every": log_every},
                   base=manifest)
    if not args.quiet:
        print(json.dumps(summary, indent=2))
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    if args.shield is not None:
        cfg["shield"]["enabled"] = args.shield == "on"
    setup = build_setup(cfg)
    learners, _meta = load_checkpoint(args.checkpoint, ddpg_cfg=setup.ddpg_cfg,
                                      cem_cfg=setup.cem_cfg)
    if len(learners) != setup.topo.n_nodes:
        print(f"checkpoint has {len(learners)} policies, network has "
              f"{setup.topo.n_nodes} nodes", file=sys.stderr)
        return 1
    scenario = None
    if args.load_step is not None:
        scenario = Scenario(kind="load_step", time_s=args.load_step[0],
                            fraction=args.load_step[1])
    try:
        log, metrics = run_evaluation(setup, learners, scenario=scenario,
                                      horizon=args.horizon,
                                      shield_enabled=cfg["shield"]["enabled"])
    except NumericalDivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 3
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_trajectory_csv(os.path.join(args.out, "trajectory_eval.csv"), log)
        _atomic_write(os.path.join(args.out, "metrics.json"),
                      json.dumps(metrics, indent=2, default=float))
    human = "\n".join(f"{k:>22}: {v}" for k, v in metrics.items())
    _emit(args, metrics, human)
    return 0


def dump_default_config(path):
    _atomic_write(path, json.dumps(DEFAULT_CONFIG, indent=2) + "\n")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dissipanet",
        description="Networked RL with per-node dissipativity-preserving action shields.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run shielded episodic training")
    p_train.add_argument("--config", default=None, help="JSON config (default: bundled ring)")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--episodes", type=int, default=None)
    p_train.add_argument("--shield", choices=("on", "off"), default=None)
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="deterministic rollout of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--horizon", type=int, default=None)
    p_eval.add_argument("--shield", choices=("on", "off"), default=None)
    p_eval.add_argument("--load-step", nargs=2, type=float, metavar=("T_SEC", "FRACTION"),
                        default=None)
    p_eval.add_argument("--json", action="store_true")
    p_eval.set_defaults(func=cmd_evaluate)

    p_check = sub.add_parser("check-assumptions",
                             help="verify the structural interconnection conditions")
    p_check.add_argument("--config", default=None)
    p_check.add_argument("--json", action="store_true")
    p_check.set_defaults(func=cmd_check)

    p_proj = sub.add_parser("project", help="debug one min-norm projection")
    p_proj.add_argument("--r", type=float, required=True)
    p_proj.add_argument("--c", type=float, required=True)
    p_proj.add_argument("--K", type=float, required=True)
    p_proj.add_argument("--u-ff", type=float, required=True)
    p_proj.add_argument("--box", nargs=2, type=float, default=None)
    p_proj.add_argument("--json", action="store_true")
    p_proj.set_defaults(func=cmd_project)

    args = parser.parse_args(argv)
    env_threads = os.environ.get("DISSIPANET_THREADS")
    if env_threads is not None and int(env_threads) < 1:
        print("DISSIPANET_THREADS must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
