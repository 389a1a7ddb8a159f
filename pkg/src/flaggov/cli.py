"""Command-line surface for running and inspecting rollouts.

Commands::

    flaggov simulate     run one policy, write report.json/daily.csv/ramp.csv
    flaggov ablate       run all four policies, write ablation.csv
    flaggov phases       walk the staged phase plan, write phases.csv
    flaggov budget-table print exposure caps for a list of fraud budgets
    flaggov lattice      print valid flag states and upgrade edges
    flaggov replay-audit verify an audit log and summarize it

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime
error. All file outputs are deterministic for a fixed seed; CSV and
JSON values are emitted as fractions at full precision.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Any, Sequence

from . import audit, config, envelope, lattice
from . import simulator as sim
from .errors import ConfigurationError, GovernanceError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route through our own
    # exit-code scheme instead
    def error(self, message: str) -> Any:
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="flaggov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="path to a YAML scenario config")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument(
            "--percent",
            action="store_true",
            help="print rates as percentages in tables (files keep fractions)",
        )

    p_sim = sub.add_parser("simulate", help="run one rollout policy")
    common(p_sim)
    p_sim.add_argument(
        "--policy",
        choices=[p.value for p in sim.PolicyVariant],
        default=sim.PolicyVariant.FULL_GOVERNANCE.value,
    )
    p_sim.add_argument(
        "--telemetry",
        action="store_true",
        help="also write per-session telemetry.jsonl (larger, slower)",
    )
    p_sim.set_defaults(func=cmd_simulate)

    p_abl = sub.add_parser("ablate", help="run the four-policy comparison")
    common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_ph = sub.add_parser("phases", help="walk the staged phase plan")
    common(p_ph)
    p_ph.set_defaults(func=cmd_phases)

    p_bud = sub.add_parser("budget-table", help="exposure caps for fraud budgets")
    p_bud.add_argument("budgets", nargs="+", type=float, help="fraud budgets in sessions/day")
    p_bud.add_argument("--sessions", type=float, default=5_000_000.0, help="daily sessions")
    p_bud.add_argument("--fraud-prior", type=float, default=0.08, help="fraud probability among treated")
    p_bud.add_argument("--percent", action="store_true")
    p_bud.set_defaults(func=cmd_budget_table)

    p_lat = sub.add_parser("lattice", help="print valid states and upgrade edges")
    p_lat.add_argument("--config", help="path to a YAML scenario config")
    p_lat.add_argument("--format", choices=["text", "dot"], default="text")
    p_lat.set_defaults(func=cmd_lattice)

    p_rep = sub.add_parser("replay-audit", help="verify and summarize an audit log")
    p_rep.add_argument("log_path", help="path to an audit log file")
    p_rep.set_defaults(func=cmd_replay_audit)

    return parser


def _load(args: argparse.Namespace) -> config.ScenarioConfig:
    cfg = config.load_config(args.config) if args.config else config.default_config()
    if getattr(args, "seed", None) is not None:
        cfg.scenario.seed = args.seed
    return cfg


def _rate(value: float, percent: bool) -> str:
    return f"{100.0 * value:.4f}%" if percent else f"{value:.6f}"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


_DAILY_HEADER = (
    "day",
    "exposure",
    "realized_exposure",
    "conversion",
    "retention_proxy",
    "fraud_rate",
    "compliance_fail_rate",
    "invariant_score",
    "abuse_signal",
    "ledger_balance",
    "actions",
)


def _daily_row(m: sim.DailyMetrics) -> tuple[Any, ...]:
    return (
        m.day,
        m.exposure,
        m.realized_exposure,
        m.conversion,
        m.retention_proxy,
        m.fraud_rate,
        m.compliance_fail_rate,
        m.invariant_score,
        m.abuse_signal,
        "" if m.ledger_balance is None else m.ledger_balance,
        "|".join(m.actions),
    )


def _report_dict(rep: sim.RunReport) -> dict[str, Any]:
    return {
        "policy": rep.policy.value,
        "seed": rep.seed,
        "daily": [
            {
                "day": m.day,
                "exposure": m.exposure,
                "realized_exposure": m.realized_exposure,
                "exposure_by_cohort": list(m.exposure_by_cohort),
                "conversion": m.conversion,
                "retention_proxy": m.retention_proxy,
                "fraud_rate": m.fraud_rate,
                "compliance_fail_rate": m.compliance_fail_rate,
                "invariant_score": m.invariant_score,
                "abuse_signal": m.abuse_signal,
                "ledger_balance": m.ledger_balance,
                "actions": list(m.actions),
            }
            for m in rep.daily
        ],
        "aggregates": dataclasses.asdict(rep.aggregates),
        "effect": dataclasses.asdict(rep.effect),
        "utility_score": rep.utility_score,
        "final_ledger_balance": rep.final_ledger_balance,
        "catalog_width": rep.catalog_width,
    }


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    policy = sim.PolicyVariant(args.policy)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "audit.log")
    if os.path.exists(log_path):
        os.unlink(log_path)
    with audit.AuditLog(log_path) as log:
        rep = sim.run_scenario(
            cfg.scenario,
            policy,
            catalog=cfg.catalog,
            rules=cfg.rules,
            controller=cfg.controller,
            alpha_schedule=cfg.alpha_schedule(),
            playbook=cfg.playbook,
            audit_log=log,
            collect_sessions=args.telemetry,
        )

    _write_text(
        os.path.join(args.out, "report.json"),
        json.dumps(_report_dict(rep), indent=2, sort_keys=True) + "\n",
    )
    _write_csv(
        os.path.join(args.out, "daily.csv"),
        _DAILY_HEADER,
        [_daily_row(m) for m in rep.daily],
    )
    _write_csv(
        os.path.join(args.out, "ramp.csv"),
        ("day", "exposure", "scripted_exposure"),
        [(m.day, m.exposure, cfg.scenario.scripted_exposure(m.day)) for m in rep.daily],
    )
    if args.telemetry:
        with open(os.path.join(args.out, "telemetry.jsonl"), "w", encoding="utf-8", newline="") as fh:
            for event in sim.emit_telemetry(rep):
                fh.write(
                    json.dumps(
                        {
                            "session_id": event.session_id,
                            "flag_state": event.flag_state.bitstring(),
                            "risk_score_at_decision": event.risk_score_at_decision,
                            "compliance_readiness": event.compliance_readiness,
                            "conversion_marker": event.conversion_marker,
                            "retention_marker": event.retention_marker,
                            "abuse_signal": event.abuse_signal,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    agg = rep.aggregates
    pct = args.percent
    print(f"policy={policy.value} seed={rep.seed} days={len(rep.daily)}")
    print(
        f"conversion={_rate(agg.conversion, pct)} retention={_rate(agg.retention, pct)} "
        f"fraud={_rate(agg.fraud_rate, pct)} compliance={_rate(agg.compliance_fail_rate, pct)}"
    )
    print(f"outputs written to {args.out}/")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    reports = sim.run_ablation(
        cfg.scenario,
        catalog=cfg.catalog,
        rules=cfg.rules,
        controller=cfg.controller,
    )
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for policy in sim.ABLATION_ORDER:
        agg = reports[policy].aggregates
        rows.append(
            (policy.value, agg.conversion, agg.retention, agg.fraud_rate, agg.compliance_fail_rate)
        )
    _write_csv(
        os.path.join(args.out, "ablation.csv"),
        ("policy", "conversion", "retention", "fraud", "compliance"),
        rows,
    )
    width = max(len(r[0]) for r in rows)
    print(f"{'policy':<{width}}  conversion  retention  fraud      compliance")
    for name, conv, ret, fraud, comp in rows:
        print(
            f"{name:<{width}}  {_rate(conv, args.percent):>10}  {_rate(ret, args.percent):>9}  "
            f"{_rate(fraud, args.percent):>9}  {_rate(comp, args.percent):>10}"
        )
    print(f"outputs written to {args.out}/")
    return 0


def cmd_phases(args: argparse.Namespace) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "audit.log")
    if os.path.exists(log_path):
        os.unlink(log_path)
    with audit.AuditLog(log_path) as log:
        rep = sim.run_phase_plan(
            cfg.scenario,
            cfg.phases,
            catalog=cfg.catalog,
            rules=cfg.rules,
            controller=cfg.controller,
            audit_log=log,
        )
    plan = cfg.phases
    _write_csv(
        os.path.join(args.out, "phases.csv"),
        ("day", "phase_index", "phase", "exposure", "conversion", "fraud_rate", "compliance_fail_rate"),
        [
            (
                m.day,
                idx,
                plan.phases[idx].name,
                m.exposure,
                m.conversion,
                m.fraud_rate,
                m.compliance_fail_rate,
            )
            for m, idx in zip(rep.daily, rep.phase_by_day)
        ],
    )
    for t in rep.transitions:
        print(f"day {t.day:>3}: {t.from_phase} -> {t.to_phase} ({t.cause})")
    print(f"final phase: {rep.final_phase} (index {rep.final_phase_index})")
    print(f"outputs written to {args.out}/")
    return 0


def cmd_budget_table(args: argparse.Namespace) -> int:
    if args.sessions <= 0:
        raise _UsageError("--sessions must be positive")
    if not (0.0 < args.fraud_prior <= 1.0):
        raise _UsageError("--fraud-prior must lie in (0, 1]")
    if any(b < 0 for b in args.budgets):
        raise _UsageError("budgets must be non-negative")
    print("budget_sessions  exposure_cap")
    for budget in args.budgets:
        cap = envelope.exposure_cap_from_budget(args.sessions, args.fraud_prior, budget)
        print(f"{budget:>15.0f}  {_rate(cap, args.percent)}")
    return 0


def cmd_lattice(args: argparse.Namespace) -> int:
    cfg = config.load_config(args.config) if args.config else config.default_config()
    graph = lattice.build_lattice(cfg.catalog)
    if args.format == "dot":
        print(lattice.to_dot(graph, cfg.catalog))
        return 0
    states = graph.states
    print(f"features: {', '.join(cfg.catalog.features)}")
    print(f"{len(states)} valid states:")
    for state in states:
        names = ", ".join(state.enabled(cfg.catalog)) or "(none)"
        print(f"  {state.bitstring()}  {names}")
    print(f"{len(graph.edges)} upgrade edges:")
    for lo, hi in graph.edges:
        print(f"  {lo.bitstring()} -> {hi.bitstring()}")
    return 0


def cmd_replay_audit(args: argparse.Namespace) -> int:
    try:
        summary = audit.replay(args.log_path)
    except OSError as exc:
        raise _UsageError(f"cannot read audit log: {exc}") from exc
    print(f"records: {summary.records}")
    for kind in sorted(summary.events_by_kind):
        print(f"  {kind}: {summary.events_by_kind[kind]}")
    print(f"last day: {summary.last_day}")
    if summary.final_exposure is not None:
        print(f"final exposure: {summary.final_exposure}")
    if summary.final_ledger_balance is not None:
        print(f"final ledger balance: {summary.final_ledger_balance}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except GovernanceError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
