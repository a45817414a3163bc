"""Command-line front end: ``gsp-route <subcommand> [options]``.

Every subcommand writes its artifacts (CSV/JSON) into ``--out`` and prints a
rendering of its main result to stdout in the ``--format`` of choice.
Failures exit with the ``exit_code`` of the raised error (3 not stabilizable,
4 infeasible parameters, 5 invalid configuration).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .analysis import certify_drift, nast
from .errors import ConfigInvalid, GspError, InfeasibleParams
from .learn import HISTORY_COLUMNS, optimize_bernoulli, policy_iteration
from .network import PATH_NAMES, feasible_region, stability_constants
from .plq import GspParams, q_batch
from .policy import Policy
from .sim import average_system_time, run_episode, summary, write_jobs_csv, write_summary_json

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def _dump_json(obj: dict, path: Path) -> None:
    write_summary_json(obj, path)


def _csv_text(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _kv_table(pairs) -> str:
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in pairs)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _gsp_params(run: cfg.RunConfig) -> GspParams:
    """Configured (beta, gamma), or the region midpoint; checked against the region."""
    region = feasible_region(run.spec)
    if run.policy.beta is None:
        beta, gamma = region.midpoint()
    else:
        beta, gamma = run.policy.beta, run.policy.gamma
    if not region.contains(beta, gamma):
        raise InfeasibleParams(
            f"(beta, gamma) = ({beta}, {gamma}) is outside the stability region "
            f"1 < gamma < beta < {region.beta_upper:.6g}"
        )
    return GspParams(beta, gamma)


def cmd_stability(run: cfg.RunConfig) -> str:
    consts = stability_constants(run.spec)
    data = consts.to_dict()
    data = {"schema_version": SCHEMA_VERSION, **data}
    _dump_json(data, run.out_dir / "stability.json")
    rows = [(" ".join(map(str, c["servers"])), c["capacity"], c["g"]) for c in data["cuts"]]
    (run.out_dir / "cuts.csv").write_text(_csv_text(rows, ("servers", "capacity", "g")))
    if run.format == "json":
        return json.dumps(data, indent=2, sort_keys=True)
    if run.format == "csv":
        return _csv_text(rows, ("servers", "capacity", "g")).rstrip("\n")
    lines = ["cut            capacity  G"]
    for servers, cap, g in rows:
        lines.append(f"{{{servers}}}".ljust(14) + f"{cap:>9.4g}  {g}")
    lo, hi = data["beta_interval"]
    lines += [
        "",
        _kv_table([
            ("min-cut capacity", _fmt(consts.min_cut_capacity)),
            ("m", f"{consts.m:.6g}"),
            ("delta_G", str(consts.delta_g)),
            ("region", f"1 < gamma^{data['exponent']} < beta^{data['exponent']} < m"),
            ("beta interval", f"({lo:g}, {hi:.6g})"),
            ("gamma interval", "(1, beta)"),
        ]),
    ]
    return "\n".join(lines)


def _make_policy(run: cfg.RunConfig) -> Policy:
    name = run.policy.name
    if name == "gsp":
        p = _gsp_params(run)
        return Policy.gsp(p.beta, p.gamma)
    if name == "ssp":
        return Policy.ssp()
    if run.policy.eta is None:
        raise ConfigInvalid("policy ob needs [policy] eta for simulate")
    return Policy.ob(run.policy.eta)


def cmd_simulate(run: cfg.RunConfig) -> str:
    policy = _make_policy(run)
    data = run_episode(run.spec, policy, run.sim)
    write_jobs_csv(data, run.out_dir / "jobs.csv")
    info = summary(data, run.spec, policy)
    info["mode"] = run.sim.mode
    info["horizon"] = run.sim.horizon
    write_summary_json(info, run.out_dir / "summary.json")
    if run.format == "json":
        return json.dumps(info, indent=2, sort_keys=True)
    flat = [(k, v) for k, v in sorted(info.items()) if not isinstance(v, (dict, list))]
    flat += [(f"utilization_{n}", u) for n, u in info["utilization"].items()]
    if run.format == "csv":
        return _csv_text([(k, _fmt(v)) for k, v in flat], ("key", "value")).rstrip("\n")
    return _kv_table([(k, _fmt(v)) for k, v in flat])


def _write_history(history, path: Path) -> str:
    rows = [[repr(float(h[c])) if c not in ("i", "delta_g") else h[c] for c in HISTORY_COLUMNS] for h in history]
    text = _csv_text(rows, HISTORY_COLUMNS)
    path.write_text(text)
    return text


def cmd_train(run: cfg.RunConfig) -> str:
    state = policy_iteration(run.spec, run.sim, run.train)
    text = _write_history(state.history, run.out_dir / "history.csv")
    params = state.to_dict()
    params["seed"] = run.sim.seed
    _dump_json(params, run.out_dir / "params.json")
    if run.format == "json":
        return json.dumps(params, indent=2, sort_keys=True)
    if run.format == "csv":
        return text.rstrip("\n")
    lines = [f"{'i':>3}  {'beta':>9}  {'gamma':>9}  {'lambda_hat':>10}  {'m_hat':>8}  {'mean W':>8}"]
    for h in state.history:
        lines.append(
            f"{h['i']:>3}  {h['beta']:>9.6f}  {h['gamma']:>9.6f}  {h['lambda_hat']:>10.5f}"
            f"  {h['m_hat']:>8.4f}  {h['mean_w']:>8.3f}"
        )
    lines.append(f"converged: {state.converged}  beta={state.beta:.6f}  gamma={state.gamma:.6f}")
    return "\n".join(lines)


def _mean_over_seeds(run: cfg.RunConfig, policy: Policy) -> float:
    sim = run.sim.replace(record_states=False)
    means = [
        average_system_time(run_episode(run.spec, policy, sim.replace(seed=run.sim.seed + k)))
        for k in range(run.replications)
    ]
    return float(np.mean(means))


def cmd_compare(run: cfg.RunConfig, baseline_mean: float | None = None) -> str:
    if run.policy.beta is not None:
        p = _gsp_params(run)
        beta, gamma = p.beta, p.gamma
    else:
        state = policy_iteration(run.spec, run.sim, run.train)
        beta, gamma = state.beta, state.gamma
    eta = run.policy.eta
    if eta is None:
        opt = run.optimize
        eta, _ = optimize_bernoulli(run.spec, run.sim, opt.grid_step, opt.refine_top, opt.refine_factor)
    results = {
        "gsp": _mean_over_seeds(run, Policy.gsp(beta, gamma)),
        "ssp": _mean_over_seeds(run, Policy.ssp()),
        "ob": _mean_over_seeds(run, Policy.ob(eta)),
    }
    table = nast(results, baseline_mean)
    data = table.to_dict()
    data.update({"beta": beta, "gamma": gamma, "eta": list(eta.eta), "seed": run.sim.seed,
                 "replications": run.replications, "horizon": run.sim.horizon})
    _dump_json(data, run.out_dir / "comparison.json")
    (run.out_dir / "comparison.csv").write_text(table.to_csv())
    if run.format == "json":
        return json.dumps(data, indent=2, sort_keys=True)
    if run.format == "csv":
        return table.to_csv().rstrip("\n")
    return table.to_text()


def cmd_drift_check(run: cfg.RunConfig) -> str:
    params = _gsp_params(run)
    cert = certify_drift(run.spec, params, run.sampler)
    _, B, _ = q_batch(cert.states, params.beta)
    combos = ["-".join(str(v) for v in b) for b in B]
    rows = [(int(n), repr(float(d)), c) for n, d, c in zip(cert.norms, cert.drifts, combos)]
    (run.out_dir / "drift.csv").write_text(_csv_text(rows, ("norm", "drift", "bottlenecks")))
    data = cert.to_dict()
    data.update({"beta": params.beta, "gamma": params.gamma, "seed": run.sampler.seed,
                 "bottleneck_order": list(PATH_NAMES)})
    _dump_json(data, run.out_dir / "certificate.json")
    if run.format == "json":
        return json.dumps(data, indent=2, sort_keys=True)
    shell_rows = [(s, v[0], v[1]) for s, v in cert.shells.items()]
    if run.format == "csv":
        return _csv_text([(s, repr(a), repr(b)) for s, a, b in shell_rows],
                         ("norm", "min_drift", "max_drift")).rstrip("\n")
    lines = [
        _kv_table([
            ("beta", f"{params.beta:.6g}"),
            ("gamma", f"{params.gamma:.6g}"),
            ("epsilon_hat", f"{cert.epsilon_hat:.6g}"),
            ("C_hat", f"{cert.C_hat:.6g}"),
            ("violations", str(len(cert.violations))),
        ]),
        "",
        f"{'norm':>6}  {'min drift':>12}  {'max drift':>12}",
    ]
    lines += [f"{s:>6}  {a:>12.4g}  {b:>12.4g}" for s, a, b in shell_rows]
    for state, d in cert.violations:
        lines.append(f"violation: x={list(state)} drift={d:.6g}")
    return "\n".join(lines)


COMMANDS = {
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "compare": cmd_compare,
    "drift-check": cmd_drift_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsp-route",
        description="Generalized shortest-path routing on the bridge queueing network.",
        epilog="Config file sections and defaults:\n" + cfg.__doc__.split("::", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file (defaults reproduce the reference instance)")
    common.add_argument("--seed", type=int, metavar="N", help="override [sim] seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default [output] dir)")
    common.add_argument("--format", choices=cfg.FORMATS, help="stdout format (default [output] format)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "stability": "cuts, m, delta_G and the feasible (beta, gamma) region",
        "simulate": "simulate one policy; writes jobs.csv and summary.json",
        "train": "learn (beta, gamma) by policy iteration; writes history.csv and params.json",
        "compare": "mean system time and NAST of GSP, SSP and OB",
        "drift-check": "sample the Lyapunov drift and fit a certificate",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "compare":
            p.add_argument("--baseline-mean", type=float, metavar="SECONDS",
                           help="external baseline mean system time for NAST (default: best policy)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = cfg.load_config(args.config, seed=args.seed, out_dir=args.out, fmt=args.format)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "compare":
            text = cmd_compare(run, args.baseline_mean)
        else:
            text = COMMANDS[args.command](run)
    except GspError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
