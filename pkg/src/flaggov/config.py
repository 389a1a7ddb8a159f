"""Scenario configuration documents.

A single YAML file describes everything a run needs: the scenario
parameters, risk-ledger settings, feature catalog, invariant rules,
controller gains, alpha-spending schedule, phase plan, playbook, and
the public-data calibration constants. Every section is optional; a
minimal document (even just a seed) loads with full defaults. Loading
validates the whole document and reports every problem it finds, each
named with its config path, rather than stopping at the first.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import yaml

from . import envelope, lattice
from . import simulator as sim
from .errors import ConfigurationError, ConfigValidationError

_SCENARIO_INT_FIELDS = {"sample_users", "horizon_days", "seed"}

# keys inside the scenario section that are not plain numbers
_SCENARIO_STRUCTURED = {
    "cohort_mix",
    "utility_weights",
    "naive_ramp",
    "readiness_trajectory",
    "fraud_spike",
    "kyc_outage",
    "fraud_budget_sessions",
}

# ledger settings live in their own section but map onto scenario fields
_LEDGER_KEYS = {
    "initial": "ledger_initial",
    "replenish": "ledger_replenish",
    "cap": "ledger_cap",
    "lambda_comp": "ledger_lambda_comp",
}

_TOP_LEVEL_KEYS = {
    "seed",
    "scenario",
    "ledger",
    "catalog",
    "rules",
    "controller",
    "alpha_schedule",
    "phases",
    "playbook",
    "calibration",
}


@dataclass(frozen=True)
class CalibrationConstants:
    """Public-data anchors carried alongside the scenario.

    These are reference values, not free simulation knobs: reports and
    sanity checks compare realized rates against them.
    """

    p_crypto: float = 0.17
    ui_friction_rate: float = 0.63
    fraud_prior: float = 0.21
    onramp_prior: float = 0.08
    budget_slope_per_user: float = 0.002
    scam_guardrail_per_user: float = 0.001


@dataclass(frozen=True)
class AlphaSpec:
    """How to build the alpha-spending schedule for a given horizon."""

    kind: str = "uniform"
    alpha: float = 0.05
    ratio: float = 0.5

    def build(self, horizon: int) -> envelope.AlphaSchedule:
        if self.kind == "geometric":
            return envelope.AlphaSchedule.geometric(self.alpha, horizon, self.ratio)
        return envelope.AlphaSchedule.uniform(self.alpha, horizon)


@dataclass
class ScenarioConfig:
    """A fully validated configuration with defaults applied."""

    scenario: sim.Scenario
    catalog: lattice.FeatureCatalog
    rules: tuple[lattice.InvariantRule, ...]
    controller: envelope.ControllerParams
    alpha: AlphaSpec
    phases: sim.PhasePlan
    playbook: tuple[sim.PlaybookRule, ...]
    calibration: CalibrationConstants = field(default_factory=CalibrationConstants)

    def alpha_schedule(self) -> envelope.AlphaSchedule:
        return self.alpha.build(self.scenario.horizon_days)

    def to_dict(self) -> dict[str, Any]:
        sc = self.scenario
        scenario_doc: dict[str, Any] = {}
        for f in dataclasses.fields(sim.Scenario):
            if f.name.startswith("ledger_"):
                continue
            value = getattr(sc, f.name)
            scenario_doc[f.name] = _plain(value)
        doc: dict[str, Any] = {
            "scenario": scenario_doc,
            "ledger": {
                key: getattr(sc, attr) for key, attr in _LEDGER_KEYS.items()
            },
            "catalog": {
                "features": list(self.catalog.features),
                "prerequisites": {
                    feat: sorted(reqs)
                    for feat, reqs in sorted(self.catalog.prerequisites.items())
                    if reqs
                },
            },
            "rules": [
                {
                    "id": r.rule_id,
                    "feature": r.guard_feature,
                    "predicate": r.predicate.value,
                    **({"threshold": r.threshold} if r.threshold is not None else {}),
                    **({"required": sorted(r.required)} if r.required else {}),
                }
                for r in self.rules
            ],
            "controller": {
                f.name: getattr(self.controller, f.name)
                for f in dataclasses.fields(envelope.ControllerParams)
            },
            "alpha_schedule": {
                "kind": self.alpha.kind,
                "alpha": self.alpha.alpha,
                "ratio": self.alpha.ratio,
            },
            "phases": {
                "fraud_baseline": self.phases.fraud_baseline,
                "compliance_baseline": self.phases.compliance_baseline,
                "plan": [
                    {
                        "name": p.name,
                        "features": list(p.features),
                        "exposure_cap": p.exposure_cap,
                        "fraud_multiplier_bound": p.fraud_multiplier_bound,
                        "retention_drop_bound": p.retention_drop_bound,
                        "compliance_multiplier_bound": p.compliance_multiplier_bound,
                        "stability_days": p.stability_days,
                        "cohorts": list(p.cohorts) if p.cohorts is not None else None,
                    }
                    for p in self.phases.phases
                ],
            },
            "playbook": [
                {
                    "trigger": r.trigger.value,
                    "action": r.action.value,
                    "multiplier": r.multiplier,
                    "min_rate": r.min_rate,
                }
                for r in self.playbook
            ],
            "calibration": {
                f.name: getattr(self.calibration, f.name)
                for f in dataclasses.fields(CalibrationConstants)
            },
        }
        return doc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(value: Any) -> Any:
    if isinstance(value, (sim.FraudSpike, sim.KycOutage)):
        return {f.name: getattr(value, f.name) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


class _Problems:
    def __init__(self) -> None:
        self.items: list[str] = []

    def add(self, path: str, message: str) -> None:
        self.items.append(f"{path}: {message}")

    def raise_if_any(self) -> None:
        if self.items:
            raise ConfigValidationError(self.items)


def _require_map(doc: Any, path: str, problems: _Problems) -> dict[str, Any]:
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        problems.add(path, f"expected a mapping, got {type(doc).__name__}")
        return {}
    return dict(doc)


def _number(value: Any, path: str, problems: _Problems) -> float | None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.add(path, f"expected a number, got {value!r}")
        return None
    return float(value)


def _integer(value: Any, path: str, problems: _Problems) -> int | None:
    if isinstance(value, bool) or not isinstance(value, int):
        problems.add(path, f"expected an integer, got {value!r}")
        return None
    return value


def _parse_scenario(doc: Mapping[str, Any], ledger_doc: Mapping[str, Any], problems: _Problems) -> sim.Scenario:
    known = {f.name for f in dataclasses.fields(sim.Scenario)}
    kwargs: dict[str, Any] = {}

    for key, value in doc.items():
        path = f"scenario.{key}"
        if key not in known or key.startswith("ledger_"):
            problems.add(path, "unknown field")
            continue
        if key in _SCENARIO_STRUCTURED:
            parsed = _parse_scenario_structured(key, value, path, problems)
            if parsed is not _SKIP:
                kwargs[key] = parsed
        elif key in _SCENARIO_INT_FIELDS:
            parsed_int = _integer(value, path, problems)
            if parsed_int is not None:
                kwargs[key] = parsed_int
        else:
            parsed_num = _number(value, path, problems)
            if parsed_num is not None:
                kwargs[key] = parsed_num

    for key, value in ledger_doc.items():
        path = f"ledger.{key}"
        if key not in _LEDGER_KEYS:
            problems.add(path, "unknown field")
            continue
        parsed_num = _number(value, path, problems)
        if parsed_num is not None:
            kwargs[_LEDGER_KEYS[key]] = parsed_num

    try:
        return sim.Scenario(**kwargs)
    except ConfigurationError as exc:
        problems.add("scenario", str(exc))
        return sim.Scenario()


_SKIP = object()


def _parse_scenario_structured(key: str, value: Any, path: str, problems: _Problems) -> Any:
    if key in ("cohort_mix", "utility_weights"):
        if not isinstance(value, Sequence) or isinstance(value, str):
            problems.add(path, "expected a list of three numbers")
            return _SKIP
        return tuple(value)
    if key == "readiness_trajectory":
        if value is None:
            return None
        if not isinstance(value, Sequence) or isinstance(value, str):
            problems.add(path, "expected a list of daily readiness values or null")
            return _SKIP
        return tuple(value)
    if key == "naive_ramp":
        if not isinstance(value, Sequence) or isinstance(value, str):
            problems.add(path, "expected a list of [day, exposure] pairs")
            return _SKIP
        pairs = []
        for i, item in enumerate(value):
            if not isinstance(item, Sequence) or isinstance(item, str) or len(item) != 2:
                problems.add(f"{path}[{i}]", "expected a [day, exposure] pair")
                return _SKIP
            pairs.append((item[0], item[1]))
        return tuple(pairs)
    if key == "fraud_budget_sessions":
        if value is None:
            return None
        return _number(value, path, problems) if value is not None else None
    if key == "fraud_spike":
        if value is None:
            return None
        fields = _require_map(value, path, problems)
        try:
            return sim.FraudSpike(**fields)
        except (TypeError, ConfigurationError) as exc:
            problems.add(path, str(exc))
            return _SKIP
    if key == "kyc_outage":
        if value is None:
            return None
        fields = _require_map(value, path, problems)
        try:
            return sim.KycOutage(**fields)
        except (TypeError, ConfigurationError) as exc:
            problems.add(path, str(exc))
            return _SKIP
    raise AssertionError(key)


def _parse_catalog(doc: Mapping[str, Any], problems: _Problems) -> lattice.FeatureCatalog:
    features = doc.get("features")
    if features is None:
        return sim.default_catalog()
    if not isinstance(features, Sequence) or isinstance(features, str):
        problems.add("catalog.features", "expected a list of feature ids")
        return sim.default_catalog()
    prereq_doc = _require_map(doc.get("prerequisites"), "catalog.prerequisites", problems)
    prereqs = {}
    for feat, reqs in prereq_doc.items():
        if not isinstance(reqs, Sequence) or isinstance(reqs, str):
            problems.add(f"catalog.prerequisites.{feat}", "expected a list of feature ids")
            continue
        prereqs[str(feat)] = frozenset(str(r) for r in reqs)
    for key in doc:
        if key not in ("features", "prerequisites"):
            problems.add(f"catalog.{key}", "unknown field")
    try:
        return lattice.FeatureCatalog(tuple(str(f) for f in features), prereqs)
    except ConfigurationError as exc:
        problems.add("catalog", str(exc))
        return sim.default_catalog()


def _parse_rules(
    doc: Any, catalog: lattice.FeatureCatalog, problems: _Problems
) -> tuple[lattice.InvariantRule, ...]:
    if doc is None:
        return sim.default_rules()
    if not isinstance(doc, Sequence) or isinstance(doc, str):
        problems.add("rules", "expected a list of rule entries")
        return sim.default_rules()
    rules = []
    for i, entry in enumerate(doc):
        entry_map = _require_map(entry, f"rules[{i}]", problems)
        rule_id = str(entry_map.get("id", f"rule-{i}"))
        path = f"rules[{i}] ({rule_id})"
        feature = entry_map.get("feature")
        predicate = entry_map.get("predicate")
        if feature is None or predicate is None:
            problems.add(path, "needs 'feature' and 'predicate'")
            continue
        feature = str(feature)
        if feature not in catalog.features:
            problems.add(path, f"guards unknown feature {feature!r}")
            continue
        try:
            pred = lattice.Predicate(str(predicate))
        except ValueError:
            problems.add(path, f"unknown predicate {predicate!r}")
            continue
        if pred is lattice.Predicate.KYC_REQUIRED:
            rules.append(lattice.kyc_required(rule_id, feature))
        elif pred is lattice.Predicate.RISK_BELOW:
            threshold = _number(entry_map.get("threshold"), f"{path}.threshold", problems)
            if threshold is None:
                continue
            rules.append(lattice.risk_below(rule_id, feature, threshold))
        else:
            required = entry_map.get("required")
            if not isinstance(required, Sequence) or isinstance(required, str):
                problems.add(f"{path}.required", "expected a list of feature ids")
                continue
            missing = [r for r in required if str(r) not in catalog.features]
            if missing:
                problems.add(path, f"requires unknown features {sorted(map(str, missing))}")
                continue
            rules.append(lattice.requires_features(rule_id, feature, tuple(str(r) for r in required)))
    return tuple(rules)


def _parse_controller(doc: Mapping[str, Any], problems: _Problems) -> envelope.ControllerParams:
    known = {f.name for f in dataclasses.fields(envelope.ControllerParams)}
    kwargs = {}
    for key, value in doc.items():
        path = f"controller.{key}"
        if key not in known:
            problems.add(path, "unknown field")
            continue
        parsed = _number(value, path, problems)
        if parsed is not None:
            kwargs[key] = parsed
    try:
        return envelope.ControllerParams(**kwargs)
    except ConfigurationError as exc:
        problems.add("controller", str(exc))
        return envelope.ControllerParams()


def _parse_alpha(doc: Mapping[str, Any], problems: _Problems) -> AlphaSpec:
    kind = doc.get("kind", "uniform")
    if kind not in ("uniform", "geometric"):
        problems.add("alpha_schedule.kind", f"expected 'uniform' or 'geometric', got {kind!r}")
        kind = "uniform"
    alpha = _number(doc.get("alpha", 0.05), "alpha_schedule.alpha", problems)
    ratio = _number(doc.get("ratio", 0.5), "alpha_schedule.ratio", problems)
    for key in doc:
        if key not in ("kind", "alpha", "ratio"):
            problems.add(f"alpha_schedule.{key}", "unknown field")
    if alpha is not None and not (0.0 < alpha < 1.0):
        problems.add("alpha_schedule.alpha", f"must lie in (0, 1), got {alpha}")
        alpha = 0.05
    return AlphaSpec(str(kind), alpha if alpha is not None else 0.05, ratio if ratio is not None else 0.5)


def _parse_phases(
    doc: Mapping[str, Any], catalog: lattice.FeatureCatalog, problems: _Problems
) -> sim.PhasePlan:
    default = sim.default_phase_plan()
    fraud_baseline = _number(
        doc.get("fraud_baseline", default.fraud_baseline), "phases.fraud_baseline", problems
    )
    compliance_baseline = _number(
        doc.get("compliance_baseline", default.compliance_baseline),
        "phases.compliance_baseline",
        problems,
    )
    for key in doc:
        if key not in ("fraud_baseline", "compliance_baseline", "plan"):
            problems.add(f"phases.{key}", "unknown field")
    plan_doc = doc.get("plan")
    if plan_doc is None:
        phases = default.phases
    elif not isinstance(plan_doc, Sequence) or isinstance(plan_doc, str):
        problems.add("phases.plan", "expected a list of phase entries")
        phases = default.phases
    else:
        parsed = []
        for i, entry in enumerate(plan_doc):
            entry_map = _require_map(entry, f"phases.plan[{i}]", problems)
            name = str(entry_map.get("name", f"phase-{i}"))
            path = f"phases.plan[{i}] ({name})"
            features = entry_map.get("features", ())
            if not isinstance(features, Sequence) or isinstance(features, str):
                problems.add(f"{path}.features", "expected a list of feature ids")
                continue
            unknown = [f for f in features if str(f) not in catalog.features]
            if unknown:
                problems.add(path, f"ships unknown features {sorted(map(str, unknown))}")
                continue
            cohorts = entry_map.get("cohorts")
            if cohorts is not None:
                if not isinstance(cohorts, Sequence) or isinstance(cohorts, str):
                    problems.add(f"{path}.cohorts", "expected a list of cohort names or null")
                    continue
                bad = [c for c in cohorts if str(c) not in sim.COHORT_NAMES]
                if bad:
                    problems.add(path, f"unknown cohorts {sorted(map(str, bad))}")
                    continue
                cohorts = tuple(str(c) for c in cohorts)
            cap = _number(entry_map.get("exposure_cap", 0.1), f"{path}.exposure_cap", problems)
            if cap is None:
                continue
            if not (0.0 < cap <= 1.0):
                problems.add(f"{path}.exposure_cap", f"must lie in (0, 1], got {cap}")
                continue
            stability = _integer(entry_map.get("stability_days", 3), f"{path}.stability_days", problems)
            if stability is None:
                continue
            parsed.append(
                sim.Phase(
                    name=name,
                    features=tuple(str(f) for f in features),
                    exposure_cap=cap,
                    fraud_multiplier_bound=float(entry_map.get("fraud_multiplier_bound", 1.5)),
                    retention_drop_bound=float(entry_map.get("retention_drop_bound", 0.01)),
                    compliance_multiplier_bound=float(entry_map.get("compliance_multiplier_bound", 2.0)),
                    stability_days=stability,
                    cohorts=cohorts,
                )
            )
        phases = tuple(parsed) if parsed else default.phases
        if not parsed:
            problems.add("phases.plan", "no valid phases")
    return sim.PhasePlan(
        phases=phases,
        fraud_baseline=fraud_baseline if fraud_baseline is not None else default.fraud_baseline,
        compliance_baseline=(
            compliance_baseline if compliance_baseline is not None else default.compliance_baseline
        ),
    )


def _parse_playbook(doc: Any, problems: _Problems) -> tuple[sim.PlaybookRule, ...]:
    if doc is None:
        return sim.default_playbook()
    if not isinstance(doc, Sequence) or isinstance(doc, str):
        problems.add("playbook", "expected a list of trigger/action entries")
        return sim.default_playbook()
    rules = []
    for i, entry in enumerate(doc):
        entry_map = _require_map(entry, f"playbook[{i}]", problems)
        path = f"playbook[{i}]"
        try:
            trigger = sim.Trigger(str(entry_map.get("trigger")))
        except ValueError:
            problems.add(path, f"unknown trigger {entry_map.get('trigger')!r}")
            continue
        try:
            action = sim.Action(str(entry_map.get("action")))
        except ValueError:
            problems.add(path, f"unknown action {entry_map.get('action')!r}")
            continue
        multiplier = _number(entry_map.get("multiplier", 0.0), f"{path}.multiplier", problems)
        min_rate = _number(entry_map.get("min_rate", 0.0), f"{path}.min_rate", problems)
        if multiplier is None or min_rate is None:
            continue
        rules.append(sim.PlaybookRule(trigger, action, multiplier, min_rate))
    return tuple(rules)


def _parse_calibration(doc: Mapping[str, Any], problems: _Problems) -> CalibrationConstants:
    known = {f.name for f in dataclasses.fields(CalibrationConstants)}
    kwargs = {}
    for key, value in doc.items():
        path = f"calibration.{key}"
        if key not in known:
            problems.add(path, "unknown field")
            continue
        parsed = _number(value, path, problems)
        if parsed is not None:
            kwargs[key] = parsed
    return CalibrationConstants(**kwargs)


def config_from_dict(doc: Mapping[str, Any] | None) -> ScenarioConfig:
    """Build a validated config from a parsed document.

    Raises ConfigValidationError listing every problem found.
    """
    doc = dict(doc) if doc else {}
    problems = _Problems()

    for key in doc:
        if key not in _TOP_LEVEL_KEYS:
            problems.add(str(key), "unknown section")

    scenario_doc = _require_map(doc.get("scenario"), "scenario", problems)
    if "seed" in doc and "seed" not in scenario_doc:
        seed = _integer(doc["seed"], "seed", problems)
        if seed is not None:
            scenario_doc["seed"] = seed
    ledger_doc = _require_map(doc.get("ledger"), "ledger", problems)
    scenario = _parse_scenario(scenario_doc, ledger_doc, problems)

    catalog = _parse_catalog(_require_map(doc.get("catalog"), "catalog", problems), problems)
    rules = _parse_rules(doc.get("rules"), catalog, problems)
    controller = _parse_controller(
        _require_map(doc.get("controller"), "controller", problems), problems
    )
    alpha = _parse_alpha(_require_map(doc.get("alpha_schedule"), "alpha_schedule", problems), problems)
    phases = _parse_phases(_require_map(doc.get("phases"), "phases", problems), catalog, problems)
    playbook = _parse_playbook(doc.get("playbook"), problems)
    calibration = _parse_calibration(
        _require_map(doc.get("calibration"), "calibration", problems), problems
    )

    problems.raise_if_any()
    return ScenarioConfig(
        scenario=scenario,
        catalog=catalog,
        rules=rules,
        controller=controller,
        alpha=alpha,
        phases=phases,
        playbook=playbook,
        calibration=calibration,
    )


def load_config(path: str) -> ScenarioConfig:
    """Load and validate a YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigValidationError([f"top level: expected a mapping, got {type(doc).__name__}"])
    return config_from_dict(doc)


def default_config() -> ScenarioConfig:
    return config_from_dict({})
