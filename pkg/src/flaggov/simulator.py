"""Discrete-time rollout simulator.

Simulates a fintech platform rolling out a three-feature bundle
(fiat onramp, wallet linking, advanced trading view) over a sampled
user population, under four policies of increasing governance: a
scripted aggressive ramp, invariant gating alone, gating plus the
safety envelope, and the full stack with the counterfactual risk
ledger.

Determinism: every random draw comes from a generator keyed by
(seed, purpose[, day]). Policies never share generator state, but they
do share the same underlying uniforms, so two policies on one seed see
the same users, the same treatment coin per user, and the same outcome
coins per session. Differences between policies are then differences
in decisions, not in luck. One consequence worth naming: because the
governed controller raises exposure by at most one step per day and
the scripted ramp rises at least that fast, the governed treated set
is a subset of the scripted treated set on every day of the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from . import causal, counterfactual, envelope, lattice
from .audit import AuditLog
from .errors import (
    ConfigurationError,
    EstimationError,
    InsufficientDataError,
    ScheduleExhaustedError,
    UndefinedCapError,
)

# rng stream ids; each purpose gets its own keyed generator
_S_POPULATION = 0
_S_RETENTION = 1
_S_DAY = 2
_S_SHADOW = 3
_S_OUTAGE = 4
_S_TREATMENT = 5
_S_MEASURE = 6

PHASE1_CAP = 0.01  # canary cap enforced while counterfactual overlap is broken

# fraction of core-capable users enrolled in the persistent holdout
# experiment whose readout gates ramp-up decisions
EXPERIMENT_CELL = 0.01


class PolicyVariant(Enum):
    NAIVE = "naive"
    INVARIANTS_ONLY = "invariants_only"
    INVARIANTS_ENVELOPE = "invariants_envelope"
    FULL_GOVERNANCE = "full_governance"


ABLATION_ORDER = (
    PolicyVariant.NAIVE,
    PolicyVariant.INVARIANTS_ONLY,
    PolicyVariant.INVARIANTS_ENVELOPE,
    PolicyVariant.FULL_GOVERNANCE,
)

# Aggressive reference ramp: (day, exposure), linearly interpolated,
# held flat outside the listed range.
DEFAULT_NAIVE_RAMP: tuple[tuple[int, float], ...] = (
    (1, 0.01),
    (3, 0.05),
    (5, 0.10),
    (7, 0.15),
    (10, 0.25),
    (14, 0.35),
    (18, 0.50),
    (22, 0.65),
    (26, 0.80),
)


@dataclass(frozen=True)
class FraudSpike:
    """Scripted multiplier on session fraud probability over a day window."""

    start_day: int
    end_day: int
    multiplier: float

    def __post_init__(self) -> None:
        if self.start_day < 1 or self.end_day < self.start_day:
            raise ConfigurationError("fraud spike window must be a valid day range")
        if self.multiplier < 0:
            raise ConfigurationError("fraud spike multiplier must be non-negative")

    def active(self, day: int) -> bool:
        return self.start_day <= day <= self.end_day


@dataclass(frozen=True)
class KycOutage:
    """A fraction of verified users temporarily lose verified status."""

    start_day: int
    end_day: int
    fraction: float

    def __post_init__(self) -> None:
        if self.start_day < 1 or self.end_day < self.start_day:
            raise ConfigurationError("outage window must be a valid day range")
        if not (0.0 <= self.fraction <= 1.0):
            raise ConfigurationError("outage fraction must lie in [0, 1]")

    def active(self, day: int) -> bool:
        return self.start_day <= day <= self.end_day


@dataclass
class Scenario:
    """Full parameterization of one simulated rollout."""

    daily_sessions: float = 5_000_000.0
    sample_users: int = 50_000
    cohort_mix: tuple[float, float, float] = (0.17, 0.50, 0.33)  # crypto, neutral, low trust
    baseline_conversion: float = 0.0012
    baseline_retention_30d: float = 0.41
    fraud_prior_onramp: float = 0.08
    violation_fraud_multiplier: float = 1.2
    treatment_conv_lift_abs: float = 0.0002
    education_encounter_rate: float = 0.10
    education_drop_rate: float = 0.05
    readiness_trajectory: tuple[float, ...] | None = None
    low_readiness_level: float = 0.5
    readiness_cap: float = 0.10
    compliance_rollback_multiplier: float = 1.5
    horizon_days: int = 26
    seed: int = 0
    # generative coefficients, exposed for calibration
    background_fraud: float = 0.0008
    fraud_risk_coef: float = 76.0
    compliance_fail_violating: float = 0.0030
    compliance_fail_compliant: float = 0.0004
    retention_treatment_boost: float = 0.09
    retention_violation_penalty: float = 0.24
    retention_fraud_penalty: float = 0.90
    retention_education_penalty: float = 0.21
    # governance knobs
    lambda_risk: float = 0.5
    penalty_invariant_weight: float = 10.0
    penalty_abuse_weight: float = 100.0
    ledger_initial: float = 0.002
    ledger_replenish: float = 0.0005
    ledger_cap: float = 0.004
    ledger_lambda_comp: float = 0.5
    shadow_fraction: float = 0.10
    fraud_budget_sessions: float | None = None
    utility_weights: tuple[float, float, float] = (0.5, 2.0, 4.0)  # retention, fraud, compliance
    naive_ramp: tuple[tuple[int, float], ...] = DEFAULT_NAIVE_RAMP
    fraud_spike: FraudSpike | None = None
    kyc_outage: KycOutage | None = None

    def __post_init__(self) -> None:
        if self.sample_users < 1:
            raise ConfigurationError("sample_users must be at least 1")
        if self.daily_sessions <= 0:
            raise ConfigurationError("daily_sessions must be positive")
        if self.horizon_days < 1:
            raise ConfigurationError("horizon_days must be at least 1")
        mix = tuple(float(m) for m in self.cohort_mix)
        if len(mix) != 3 or any(m < 0 for m in mix):
            raise ConfigurationError("cohort_mix needs three non-negative shares")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigurationError(f"cohort_mix must sum to 1, got {sum(mix)}")
        self.cohort_mix = mix
        for name in (
            "baseline_conversion",
            "baseline_retention_30d",
            "fraud_prior_onramp",
            "education_encounter_rate",
            "education_drop_rate",
            "readiness_cap",
            "background_fraud",
            "compliance_fail_violating",
            "compliance_fail_compliant",
        ):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.violation_fraud_multiplier < 1.0:
            raise ConfigurationError("violation_fraud_multiplier must be at least 1")
        if not (0.0 < self.shadow_fraction < 0.5):
            raise ConfigurationError("shadow_fraction must lie in (0, 0.5)")
        if self.readiness_trajectory is not None:
            traj = tuple(float(r) for r in self.readiness_trajectory)
            if len(traj) != self.horizon_days:
                raise ConfigurationError("readiness_trajectory length must equal horizon_days")
            if any(not (0.0 <= r <= 1.0) for r in traj):
                raise ConfigurationError("readiness values must lie in [0, 1]")
            self.readiness_trajectory = traj
        ramp = tuple((int(d), float(v)) for d, v in self.naive_ramp)
        if not ramp or any(not (0.0 <= v <= 1.0) for _, v in ramp):
            raise ConfigurationError("naive_ramp needs day/exposure pairs with exposures in [0, 1]")
        if any(b[0] <= a[0] for a, b in zip(ramp, ramp[1:])):
            raise ConfigurationError("naive_ramp days must be strictly increasing")
        self.naive_ramp = ramp

    def readiness(self) -> tuple[float, ...]:
        """Readiness per day; the default is full readiness with a dip to
        0.3 on days 8-12, a scripted verification-pipeline brownout."""
        if self.readiness_trajectory is not None:
            return self.readiness_trajectory
        return tuple(0.3 if 8 <= day <= 12 else 1.0 for day in range(1, self.horizon_days + 1))

    def scripted_exposure(self, day: int) -> float:
        days = np.array([d for d, _ in self.naive_ramp], dtype=float)
        vals = np.array([v for _, v in self.naive_ramp], dtype=float)
        return float(np.interp(float(day), days, vals))


class Trigger(Enum):
    FRAUD_SPIKE = "fraud_spike"
    KYC_FAILURE_RATE = "kyc_failure_rate"
    RETENTION_DROP = "retention_drop"
    BUDGET_DRIFT = "budget_drift"


class Action(Enum):
    FREEZE_AND_ROLLBACK_HALF = "freeze_and_rollback_half"
    DISABLE_ONRAMP_NEW_USERS = "disable_onramp_new_users"
    SLOW_RAMP = "slow_ramp"
    REDUCE_ONRAMP_EXPOSURE = "reduce_onramp_exposure"


@dataclass(frozen=True)
class PlaybookRule:
    """Trigger condition mapped to a mitigation action.

    ``multiplier`` scales the trailing baseline; for retention it is an
    absolute proxy drop instead. ``min_rate`` is a noise floor: the
    trigger only fires once today's rate also clears it, which keeps
    near-zero metrics from tripping on a handful of events.
    """

    trigger: Trigger
    action: Action
    multiplier: float
    min_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.multiplier < 0 or self.min_rate < 0:
            raise ConfigurationError("playbook thresholds must be non-negative")


def default_playbook() -> tuple[PlaybookRule, ...]:
    return (
        PlaybookRule(Trigger.FRAUD_SPIKE, Action.FREEZE_AND_ROLLBACK_HALF, 2.0),
        PlaybookRule(Trigger.KYC_FAILURE_RATE, Action.DISABLE_ONRAMP_NEW_USERS, 1.5, min_rate=0.0005),
        PlaybookRule(Trigger.RETENTION_DROP, Action.SLOW_RAMP, 0.02),
        PlaybookRule(Trigger.BUDGET_DRIFT, Action.REDUCE_ONRAMP_EXPOSURE, 0.0),
    )


@dataclass(frozen=True)
class DailyMetrics:
    day: int
    exposure: float
    realized_exposure: float
    exposure_by_cohort: tuple[float, ...]
    conversion: float
    retention_proxy: float
    fraud_rate: float
    compliance_fail_rate: float
    invariant_score: float
    abuse_signal: float
    ledger_balance: float | None
    actions: tuple[str, ...]


def apply_playbook(
    rules: Sequence[PlaybookRule],
    window: Sequence[DailyMetrics],
) -> tuple[PlaybookRule, ...]:
    """Evaluate triggers for the latest day against the trailing window.

    ``window`` is ordered oldest to newest; the last entry is the day
    under evaluation and earlier entries form the trailing baseline.
    With no history only budget drift can fire, since it needs nothing
    but today's ledger balance.
    """
    if not window:
        return ()
    today = window[-1]
    history = window[:-1]
    fired: list[PlaybookRule] = []
    for rule in rules:
        if rule.trigger is Trigger.BUDGET_DRIFT:
            if today.ledger_balance is not None and today.ledger_balance < 0.0:
                fired.append(rule)
            continue
        if not history:
            continue
        if rule.trigger is Trigger.FRAUD_SPIKE:
            base = float(np.mean([m.fraud_rate for m in history]))
            if base > 0.0 and today.fraud_rate >= rule.multiplier * base and today.fraud_rate >= rule.min_rate:
                fired.append(rule)
        elif rule.trigger is Trigger.KYC_FAILURE_RATE:
            base = float(np.mean([m.compliance_fail_rate for m in history]))
            if (
                base > 0.0
                and today.compliance_fail_rate >= rule.multiplier * base
                and today.compliance_fail_rate >= rule.min_rate
            ):
                fired.append(rule)
        elif rule.trigger is Trigger.RETENTION_DROP:
            base = float(np.mean([m.retention_proxy for m in history]))
            if base - today.retention_proxy > rule.multiplier:
                fired.append(rule)
    return tuple(fired)


@dataclass(frozen=True)
class Aggregates:
    conversion: float
    retention: float
    fraud_rate: float
    compliance_fail_rate: float
    mean_exposure: float


@dataclass(frozen=True)
class DaySessions:
    """Per-session arrays retained for telemetry and audits."""

    day: int
    state_codes: np.ndarray  # int bitmask per user, 0 = unexposed
    converted: np.ndarray
    fraud: np.ndarray
    compliance_fail: np.ndarray


@dataclass
class RunReport:
    policy: PolicyVariant
    seed: int
    daily: tuple[DailyMetrics, ...]
    aggregates: Aggregates
    effect: causal.EffectEstimate
    utility_score: float
    final_ledger_balance: float | None
    catalog_width: int
    retained: np.ndarray = field(repr=False)
    sessions: tuple[DaySessions, ...] = field(repr=False, default=())
    risk_scores: np.ndarray | None = field(repr=False, default=None)
    readiness_by_day: tuple[float, ...] = ()


@dataclass(frozen=True)
class TelemetryEvent:
    session_id: str
    flag_state: lattice.FlagState
    risk_score_at_decision: float
    compliance_readiness: float
    conversion_marker: bool
    retention_marker: bool
    abuse_signal: bool


def default_catalog() -> lattice.FeatureCatalog:
    return lattice.FeatureCatalog(
        features=("onramp", "wallet", "advanced_view"),
        prerequisites={"advanced_view": frozenset({"onramp", "wallet"})},
    )


def default_rules() -> tuple[lattice.InvariantRule, ...]:
    # onramp is gated on both identity verification and fraud risk;
    # wallet on risk alone; the composed view restates its prerequisites
    # as a rule so attribute drift forces a re-check on downgrade paths.
    return (
        lattice.kyc_required("kyc-onramp", "onramp"),
        lattice.risk_below("risk-onramp", "onramp", 0.5),
        lattice.risk_below("risk-wallet", "wallet", 0.5),
        lattice.requires_features("advanced-core", "advanced_view", {"onramp", "wallet"}),
    )


# cohort generative constants: name, kyc rate, risk beta, trust beta,
# account age scale (days), prior paid rate, dispute rate
_COHORT_PARAMS = (
    ("crypto_experienced", 0.90, (2.0, 8.0), (8.0, 2.0), 700.0, 0.70, 0.10),
    ("neutral", 0.55, (3.0, 5.0), (5.0, 3.0), 400.0, 0.40, 0.25),
    ("low_trust", 0.25, (5.0, 3.0), (3.0, 6.0), 150.0, 0.15, 0.80),
)

COHORT_NAMES = tuple(row[0] for row in _COHORT_PARAMS)


@dataclass
class Population:
    """Sampled users as parallel arrays; one row per user."""

    cohort_codes: np.ndarray
    kyc: np.ndarray
    risk: np.ndarray
    trust: np.ndarray
    age_days: np.ndarray
    prior_paid: np.ndarray
    disputes: np.ndarray
    conv_covariate: np.ndarray  # uniform(0, 1), drives conversion propensity

    @property
    def size(self) -> int:
        return int(self.cohort_codes.size)

    def conv_multiplier(self) -> np.ndarray:
        # mean exactly 1 so aggregate conversion matches the baseline
        return 0.4 + 1.2 * self.conv_covariate

    def user_contexts(self) -> Iterator[lattice.UserContext]:
        cohorts = tuple(lattice.Cohort(name) for name in COHORT_NAMES)
        for i in range(self.size):
            yield lattice.UserContext(
                user_id=f"u{i}",
                kyc_verified=bool(self.kyc[i]),
                risk_score=float(self.risk[i]),
                device_trust=float(self.trust[i]),
                account_age_days=int(self.age_days[i]),
                cohort=cohorts[int(self.cohort_codes[i])],
                prior_paid_activity=bool(self.prior_paid[i]),
            )


def sample_population(scenario: Scenario) -> Population:
    rng = np.random.default_rng((scenario.seed, _S_POPULATION))
    n = scenario.sample_users
    codes = rng.choice(3, size=n, p=np.array(scenario.cohort_mix))
    kyc = np.zeros(n, dtype=bool)
    risk = np.zeros(n)
    trust = np.zeros(n)
    age = np.zeros(n)
    paid = np.zeros(n, dtype=bool)
    disputes = np.zeros(n)
    for code, row in enumerate(_COHORT_PARAMS):
        _, kyc_rate, risk_ab, trust_ab, age_scale, paid_rate, disp_rate = row
        mask = codes == code
        m = int(mask.sum())
        if m == 0:
            continue
        kyc[mask] = rng.random(m) < kyc_rate
        risk[mask] = rng.beta(*risk_ab, size=m)
        trust[mask] = rng.beta(*trust_ab, size=m)
        age[mask] = np.clip(rng.exponential(age_scale, size=m), 1, 3650)
        paid[mask] = rng.random(m) < paid_rate
        disputes[mask] = rng.poisson(disp_rate, size=m)
    covariate = rng.random(n)
    return Population(
        cohort_codes=codes,
        kyc=kyc,
        risk=risk,
        trust=trust,
        age_days=age.astype(int),
        prior_paid=paid,
        disputes=disputes,
        conv_covariate=covariate,
    )


def _passing_matrix(
    pop: Population,
    catalog: lattice.FeatureCatalog,
    rules: Sequence[lattice.InvariantRule],
    states: Sequence[lattice.FlagState],
) -> np.ndarray:
    """bool[user, state]: does the user satisfy every rule active in the state."""
    out = np.ones((pop.size, len(states)), dtype=bool)
    for s_idx, state in enumerate(states):
        enabled = set(state.enabled(catalog))
        for rule in rules:
            catalog.index(rule.guard_feature)  # surfaces unknown guards early
            if rule.guard_feature not in enabled:
                continue
            if rule.predicate is lattice.Predicate.KYC_REQUIRED:
                out[:, s_idx] &= pop.kyc
            elif rule.predicate is lattice.Predicate.RISK_BELOW:
                out[:, s_idx] &= pop.risk < rule.threshold
            else:
                if not rule.required <= enabled:
                    out[:, s_idx] = False
    return out


@dataclass
class RolloutFrame:
    """Static per-run data shared by every policy on one seed."""

    scenario: Scenario
    catalog: lattice.FeatureCatalog
    rules: tuple[lattice.InvariantRule, ...]
    pop: Population
    states: tuple[lattice.FlagState, ...]
    target_state: lattice.FlagState
    target_code: int
    max_state_codes: np.ndarray  # richest valid state per user, 0 if none
    naive_violates_target: np.ndarray
    treat_uniform: np.ndarray  # sticky per-user treatment coin

    @classmethod
    def build(
        cls,
        scenario: Scenario,
        catalog: lattice.FeatureCatalog,
        rules: Sequence[lattice.InvariantRule],
        target_features: Sequence[str] | None = None,
        pop: Population | None = None,
    ) -> "RolloutFrame":
        if pop is None:
            pop = sample_population(scenario)
        if target_features is None:
            target_features = catalog.features
        target = lattice.FlagState.from_features(catalog, target_features)
        if not lattice.is_valid_state(catalog, target):
            raise ConfigurationError("target state violates catalog prerequisites")
        target_code = target.as_int()
        reachable = tuple(
            s for s in lattice.enumerate_valid_states(catalog) if s.as_int() & ~target_code == 0
        )
        passing = _passing_matrix(pop, catalog, rules, reachable)
        # maximal passing state per user: scan poorest to richest, last write wins
        order = sorted(
            range(len(reachable)),
            key=lambda i: (sum(reachable[i].bits), reachable[i].as_int()),
        )
        max_codes = np.zeros(pop.size, dtype=np.int64)
        for idx in order:
            max_codes[passing[:, idx]] = reachable[idx].as_int()
        target_idx = reachable.index(target)
        treat_uniform = np.random.default_rng((scenario.seed, _S_TREATMENT)).random(pop.size)
        return cls(
            scenario=scenario,
            catalog=catalog,
            rules=tuple(rules),
            pop=pop,
            states=reachable,
            target_state=target,
            target_code=target_code,
            max_state_codes=max_codes,
            naive_violates_target=~passing[:, target_idx],
            treat_uniform=treat_uniform,
        )


def _day_uniforms(seed: int, day: int, n: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng((seed, _S_DAY, day))
    # fixed draw order is part of the determinism contract
    return {
        "conv": rng.random(n),
        "fraud": rng.random(n),
        "comp": rng.random(n),
        "edu_enc": rng.random(n),
        "edu_drop": rng.random(n),
    }


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def violation_mask(
    frame: RolloutFrame, state_codes: np.ndarray, kyc_now: np.ndarray
) -> np.ndarray:
    """Re-check assigned states against current attributes, vectorized.

    Mirrors lattice.evaluate_user over the whole population; a parity
    test keeps the two implementations in lockstep.
    """
    pop = frame.pop
    catalog = frame.catalog
    viol = np.zeros(pop.size, dtype=bool)
    for i, mask in enumerate(catalog.prereq_masks()):
        has_feat = ((state_codes >> i) & 1).astype(bool)
        missing = (state_codes & mask) != mask
        viol |= has_feat & missing
    for rule in frame.rules:
        bit = catalog.index(rule.guard_feature)
        active = ((state_codes >> bit) & 1).astype(bool)
        if rule.predicate is lattice.Predicate.KYC_REQUIRED:
            viol |= active & ~kyc_now
        elif rule.predicate is lattice.Predicate.RISK_BELOW:
            viol |= active & (pop.risk >= rule.threshold)
        else:
            required_mask = 0
            for feat in rule.required:
                required_mask |= 1 << catalog.index(feat)
            viol |= active & ((state_codes & required_mask) != required_mask)
    return viol


@dataclass
class _DayOutcomes:
    onramp_on: np.ndarray
    converted: np.ndarray
    fraud: np.ndarray
    compliance_fail: np.ndarray
    encounter: np.ndarray
    dropped: np.ndarray
    conv_prob: np.ndarray
    fraud_prob: np.ndarray


def _draw_outcomes(
    scenario: Scenario,
    frame: RolloutFrame,
    day: int,
    treated: np.ndarray,
    state_codes: np.ndarray,
    violating: np.ndarray,
    conv_mult: np.ndarray,
) -> _DayOutcomes:
    pop = frame.pop
    onramp_bit = frame.catalog.index("onramp")
    onramp_on = ((state_codes >> onramp_bit) & 1).astype(bool)
    spike = 1.0
    if scenario.fraud_spike is not None and scenario.fraud_spike.active(day):
        spike = scenario.fraud_spike.multiplier
    draws = _day_uniforms(scenario.seed, day, pop.size)

    # conversion: baseline scaled by user propensity, plus an absolute
    # lift on onramp exposure, zeroed when the education checkpoint
    # loses the user for the session
    conv_prob = scenario.baseline_conversion * conv_mult
    conv_prob = np.where(onramp_on, conv_prob + scenario.treatment_conv_lift_abs, conv_prob)
    encounter = onramp_on & (draws["edu_enc"] < scenario.education_encounter_rate)
    dropped = encounter & (draws["edu_drop"] < scenario.education_drop_rate)
    conv_prob = np.where(dropped, 0.0, conv_prob)
    converted = draws["conv"] < np.clip(conv_prob, 0.0, 1.0)

    # fraud: background everywhere, amplified on onramp sessions by a
    # convex function of risk score, again for invariant-violating
    # assignments, and by any scripted spike
    fraud_prob = np.full(pop.size, scenario.background_fraud)
    exposed = scenario.background_fraud * (1.0 + scenario.fraud_risk_coef * pop.risk**6)
    fraud_prob = np.where(onramp_on, exposed, fraud_prob)
    fraud_prob = np.where(
        violating & onramp_on, fraud_prob * scenario.violation_fraud_multiplier, fraud_prob
    )
    fraud = draws["fraud"] < np.clip(fraud_prob * spike, 0.0, 1.0)

    comp_prob = np.zeros(pop.size)
    comp_prob = np.where(treated, scenario.compliance_fail_compliant, comp_prob)
    comp_prob = np.where(violating, scenario.compliance_fail_violating, comp_prob)
    compliance_fail = draws["comp"] < comp_prob

    return _DayOutcomes(
        onramp_on=onramp_on,
        converted=converted,
        fraud=fraud,
        compliance_fail=compliance_fail,
        encounter=encounter,
        dropped=dropped,
        conv_prob=np.clip(conv_prob, 0.0, 1.0),
        fraud_prob=np.clip(fraud_prob * spike, 0.0, 1.0),
    )


@dataclass
class _RetentionState:
    """Per-user retention logit offsets; each event kind hits a user once."""

    base_logit: float
    offsets: np.ndarray
    got_boost: np.ndarray
    got_violation: np.ndarray
    got_fraud: np.ndarray
    got_education: np.ndarray

    @classmethod
    def fresh(cls, scenario: Scenario, n: int) -> "_RetentionState":
        p = scenario.baseline_retention_30d
        return cls(
            base_logit=math.log(p / (1.0 - p)),
            offsets=np.zeros(n),
            got_boost=np.zeros(n, dtype=bool),
            got_violation=np.zeros(n, dtype=bool),
            got_fraud=np.zeros(n, dtype=bool),
            got_education=np.zeros(n, dtype=bool),
        )

    def update(
        self,
        scenario: Scenario,
        treated: np.ndarray,
        violating: np.ndarray,
        fraud: np.ndarray,
        dropped: np.ndarray,
    ) -> None:
        valid_treated = treated & ~violating
        newly = valid_treated & ~self.got_boost
        self.offsets[newly] += scenario.retention_treatment_boost
        self.got_boost |= valid_treated
        newly = violating & ~self.got_violation
        self.offsets[newly] -= scenario.retention_violation_penalty
        self.got_violation |= violating
        hit = fraud & treated & ~self.got_fraud
        self.offsets[hit] -= scenario.retention_fraud_penalty
        self.got_fraud |= fraud & treated
        hit = dropped & ~self.got_education
        self.offsets[hit] -= scenario.retention_education_penalty
        self.got_education |= dropped

    def probabilities(self) -> np.ndarray:
        return _sigmoid_arr(self.base_logit + self.offsets)

    def proxy(self) -> float:
        return float(self.probabilities().mean())


@dataclass
class _Accumulators:
    conv_treated: int = 0
    n_treated: int = 0
    conv_control: int = 0
    n_control: int = 0
    fraud_treated: int = 0
    fraud_control: int = 0
    comp_treated: int = 0
    comp_control: int = 0
    edu_encounters: int = 0
    edu_drops: int = 0
    # platform-scale experiment counts backing the ramp gate
    exp_n_treated: int = 0
    exp_conv_treated: int = 0
    exp_fraud_treated: int = 0
    exp_n_control: int = 0
    exp_conv_control: int = 0
    exp_fraud_control: int = 0

    def absorb(self, treated: np.ndarray, out: _DayOutcomes) -> None:
        n_t = int(treated.sum())
        self.n_treated += n_t
        self.n_control += treated.size - n_t
        self.conv_treated += int(out.converted[treated].sum())
        self.conv_control += int(out.converted[~treated].sum())
        self.fraud_treated += int(out.fraud[treated].sum())
        self.fraud_control += int(out.fraud[~treated].sum())
        self.comp_treated += int(out.compliance_fail[treated].sum())
        self.comp_control += int(out.compliance_fail[~treated].sum())
        self.edu_encounters += int(out.encounter.sum())
        self.edu_drops += int(out.dropped.sum())

    def absorb_experiment(
        self,
        scenario: Scenario,
        day: int,
        cell_fraction: float,
        rates: tuple[float, float, float, float],
    ) -> None:
        """Accumulate one day of the persistent holdout experiment.

        The gate does not read the rollout's own traffic. The platform
        runs a fixed experiment cell (treated at target state) against
        a holdout, and ramp decisions consume that readout. Counts are
        synthesized at platform volume from the panel's rate estimates
        via a normal approximation; the noise stream is keyed by day
        alone, never by policy, and the rates come from potential
        outcomes rather than the realized treated set, so every
        governance variant on one seed observes the identical readout.
        """
        p_conv_t, p_conv_c, p_fraud_t, p_fraud_c = rates
        n_t = max(1, int(round(cell_fraction * scenario.daily_sessions)))
        n_c = max(1, int(round(scenario.daily_sessions - n_t)))
        sizes = (n_t, n_c, n_t, n_c)
        probs = (p_conv_t, p_conv_c, p_fraud_t, p_fraud_c)
        noise = np.random.default_rng((scenario.seed, _S_MEASURE, day)).standard_normal(4)
        counts = []
        for n, p, z in zip(sizes, probs, noise):
            mean = n * p
            sd = math.sqrt(max(n * p * (1.0 - p), 0.0))
            counts.append(int(np.clip(round(mean + sd * z), 0, n)))
        self.exp_n_treated += n_t
        self.exp_n_control += n_c
        self.exp_conv_treated += counts[0]
        self.exp_conv_control += counts[1]
        self.exp_fraud_treated += counts[2]
        self.exp_fraud_control += counts[3]


def _uplift_gate(
    acc: _Accumulators,
    scenario: Scenario,
    schedule: envelope.AlphaSchedule,
    day: int,
) -> bool:
    """Cumulative risk-adjusted uplift test at the day's alpha allotment."""
    if acc.exp_n_treated == 0 or acc.exp_n_control == 0:
        return False
    test = causal.two_proportion_test(
        acc.exp_conv_treated, acc.exp_n_treated, acc.exp_conv_control, acc.exp_n_control
    )
    uplift = acc.exp_conv_treated / acc.exp_n_treated - acc.exp_conv_control / acc.exp_n_control
    fraud_delta = (
        acc.exp_fraud_treated / acc.exp_n_treated - acc.exp_fraud_control / acc.exp_n_control
    )
    # one-sided superiority: halve the symmetric p on the favorable side
    p_one = test.p_value / 2.0 if uplift > 0 else 1.0 - test.p_value / 2.0
    try:
        alpha_t = schedule.spend(day)
    except ScheduleExhaustedError:
        return False  # error budget spent: hold exposure where it is
    return envelope.ramp_decision(
        uplift, max(0.0, fraud_delta), scenario.lambda_risk, p_one, alpha_t
    )


# minimum treated sessions a cohort must pool before its residual row is
# emitted; below this the rate estimates are binomial noise
_CF_ROW_MASS = 2000


@dataclass
class _CohortBuffer:
    treated_sessions: int = 0
    treated_fraud: int = 0
    treated_comp: int = 0
    shadow_sessions: int = 0
    shadow_fraud: int = 0

    def reset(self) -> None:
        self.treated_sessions = 0
        self.treated_fraud = 0
        self.treated_comp = 0
        self.shadow_sessions = 0
        self.shadow_fraud = 0


@dataclass
class _CfState:
    """Counterfactual machinery carried across days (full governance only).

    Regression rows are emitted per cohort only once the cohort has
    pooled enough treated sessions for its residual target to be signal
    rather than binomial noise; daily slices at these event rates are
    useless for fitting.
    """

    shadow_mask: np.ndarray
    buffers: list[_CohortBuffer] = field(default_factory=list)
    abuse_history: list[tuple[counterfactual.RiskFeatureVector, float]] = field(default_factory=list)
    comp_history: list[tuple[counterfactual.RiskFeatureVector, float]] = field(default_factory=list)
    shadow_events: list[tuple[str, int]] = field(default_factory=list)
    cum_treated_sessions: int = 0
    cum_treated_comp: int = 0
    abuse_model: counterfactual.CfModel = counterfactual.CfModel((0.0, 0.0, 0.0))
    comp_model: counterfactual.CfModel = counterfactual.CfModel((0.0, 0.0, 0.0))
    abuse_cf: float = 0.0
    comp_cf: float = 0.0
    overlap_failed: bool = False


def _risk_features(pop: Population, mask: np.ndarray) -> counterfactual.RiskFeatureVector:
    return counterfactual.RiskFeatureVector(
        device_trust=float(pop.trust[mask].mean()),
        account_age_norm=float((pop.age_days[mask] / 3650.0).mean()),
        prior_disputes=float(pop.disputes[mask].mean()),
    )


class _Engine:
    """One policy's mutable state, advanced one day at a time.

    run_scenario drives it over a fixed frame; run_phase_plan drives it
    with per-phase frames, eligibility masks, and exposure caps.
    """

    def __init__(
        self,
        scenario: Scenario,
        policy: PolicyVariant,
        base_frame: RolloutFrame,
        params: envelope.ControllerParams,
        schedule: envelope.AlphaSchedule,
        playbook: Sequence[PlaybookRule],
        audit_log: AuditLog | None,
        collect_sessions: bool,
    ) -> None:
        self.scenario = scenario
        self.policy = policy
        self.params = params
        self.schedule = schedule
        self.playbook = tuple(playbook)
        self.audit_log = audit_log
        self.collect = collect_sessions
        self.governed = policy in (PolicyVariant.INVARIANTS_ENVELOPE, PolicyVariant.FULL_GOVERNANCE)
        self.full = policy is PolicyVariant.FULL_GOVERNANCE

        pop = base_frame.pop
        self.pop = pop
        self.n = pop.size
        self.conv_mult = pop.conv_multiplier()
        self.retention = _RetentionState.fresh(scenario, self.n)
        self.acc = _Accumulators()
        self.ever_treated = np.zeros(self.n, dtype=bool)
        self.conv_totals = np.zeros(self.n, dtype=np.int64)
        self.seg = envelope.SegmentState("all", params.min_exposure)
        self.prev_exposure: float | None = None
        self.prev_states = np.zeros(self.n, dtype=np.int64)
        self.fraud_rate_window: list[float] = []
        self.freeze_until = 0
        self.step_scale = 1.0
        self.new_user_gate = False
        self.daily: list[DailyMetrics] = []
        self.sessions: list[DaySessions] = []

        self.cf: _CfState | None = None
        self.ledger: counterfactual.RiskLedger | None = None
        if self.full:
            shadow_rng = np.random.default_rng((scenario.seed, _S_SHADOW))
            shadow_mask = np.zeros(self.n, dtype=bool)
            elig_idx = np.flatnonzero(base_frame.max_state_codes > 0)
            if elig_idx.size:
                k = max(1, int(round(scenario.shadow_fraction * elig_idx.size)))
                picked = shadow_rng.choice(elig_idx, size=min(k, elig_idx.size), replace=False)
                shadow_mask[picked] = True
            self.cf = _CfState(
                shadow_mask=shadow_mask,
                buffers=[_CohortBuffer() for _ in COHORT_NAMES],
            )
            self.ledger = counterfactual.RiskLedger(
                balance=scenario.ledger_initial,
                replenish_rate=scenario.ledger_replenish,
                lambda_comp=scenario.ledger_lambda_comp,
                balance_cap=scenario.ledger_cap,
            )

        self.outage_mask = np.zeros(self.n, dtype=bool)
        if scenario.kyc_outage is not None:
            outage_rng = np.random.default_rng((scenario.seed, _S_OUTAGE))
            verified = np.flatnonzero(pop.kyc)
            k = int(round(scenario.kyc_outage.fraction * verified.size))
            if k > 0:
                self.outage_mask[
                    outage_rng.choice(verified, size=min(k, verified.size), replace=False)
                ] = True

    def _kyc_now(self, day: int) -> np.ndarray:
        if self.scenario.kyc_outage is not None and self.scenario.kyc_outage.active(day):
            return self.pop.kyc & ~self.outage_mask
        return self.pop.kyc

    def _experiment_cell(
        self, day: int, frame: RolloutFrame, kyc_now: np.ndarray
    ) -> tuple[float, tuple[float, float, float, float]] | None:
        """Potential-outcome rates for the holdout experiment's two arms.

        Treated arm: core-capable users under valid target assignment.
        Control arm: platform background. Both are panel expectations,
        independent of which users this policy actually treated today.
        """
        scenario = self.scenario
        onramp_bit = frame.catalog.index("onramp")
        core = ((frame.max_state_codes >> onramp_bit) & 1).astype(bool) & kyc_now
        if not core.any():
            return None
        spike = 1.0
        if scenario.fraud_spike is not None and scenario.fraud_spike.active(day):
            spike = scenario.fraud_spike.multiplier
        edu_keep = 1.0 - scenario.education_encounter_rate * scenario.education_drop_rate
        conv_t_arr = np.clip(
            (scenario.baseline_conversion * self.conv_mult[core] + scenario.treatment_conv_lift_abs)
            * edu_keep,
            0.0,
            1.0,
        )
        fraud_t_arr = np.clip(
            scenario.background_fraud
            * (1.0 + scenario.fraud_risk_coef * self.pop.risk[core] ** 6)
            * spike,
            0.0,
            1.0,
        )
        rates = (
            float(conv_t_arr.mean()),
            float(np.clip(scenario.baseline_conversion * self.conv_mult, 0.0, 1.0).mean()),
            float(fraud_t_arr.mean()),
            float(min(scenario.background_fraud * spike, 1.0)),
        )
        return EXPERIMENT_CELL * float(core.mean()), rates

    def step(
        self,
        day: int,
        frame: RolloutFrame,
        extra_cap: float | None = None,
        eligible_override: np.ndarray | None = None,
    ) -> DailyMetrics:
        scenario = self.scenario
        params = self.params
        ready = scenario.readiness()[day - 1]
        kyc_now = self._kyc_now(day)
        attrs_drifting = scenario.kyc_outage is not None

        eligible = frame.max_state_codes > 0
        if eligible_override is not None:
            eligible = eligible & eligible_override

        # invariant score as seen at decision time: yesterday's
        # assignment re-checked against today's attributes
        if day == 1:
            si_signal = 1.0
        else:
            si_signal = 1.0 - float(violation_mask(frame, self.prev_states, kyc_now).mean())

        trail = float(np.mean(self.fraud_rate_window[-3:])) if self.fraud_rate_window else 0.0
        if self.policy in (PolicyVariant.NAIVE, PolicyVariant.INVARIANTS_ONLY):
            exposure = scenario.scripted_exposure(day)
            penalty = 0.0
            abuse_signal = trail
            if self.policy is PolicyVariant.NAIVE:
                admit_prob = np.full(self.n, exposure)
            else:
                admit_prob = np.where(eligible, exposure, 0.0)
        else:
            abuse_signal = trail
            if self.full and self.cf is not None:
                # never less cautious than the observed trailing rate
                abuse_signal = max(trail, self.cf.abuse_cf)
            penalty = envelope.safety_penalty(
                si_signal,
                abuse_signal,
                scenario.penalty_invariant_weight,
                scenario.penalty_abuse_weight,
            )
            signals = envelope.SafetySignals(
                abuse_rate=abuse_signal,
                budget=params.budget_target,
                compliance_readiness=ready,
                invariant_score=si_signal,
                safety_penalty=penalty,
            )
            balance = self.ledger.balance if self.ledger is not None else 0.0
            env_ok = envelope.within_envelope(params, signals, self.seg.exposure, balance)
            up_ok = day > self.freeze_until and _uplift_gate(self.acc, scenario, self.schedule, day)
            eff = params if self.step_scale == 1.0 else replace(params, step=params.step * self.step_scale)
            self.seg = envelope.schedule_update(self.seg, signals, env_ok, up_ok, eff)
            exposure = self.seg.exposure
            if ready < scenario.low_readiness_level:
                exposure = min(exposure, scenario.readiness_cap)
            if scenario.fraud_budget_sessions is not None:
                try:
                    cap = envelope.exposure_cap_from_budget(
                        scenario.daily_sessions,
                        scenario.fraud_prior_onramp,
                        scenario.fraud_budget_sessions,
                    )
                except UndefinedCapError:
                    cap = params.e_max
                exposure = min(exposure, cap)
            if self.full and self.cf is not None and self.cf.overlap_failed:
                exposure = min(exposure, PHASE1_CAP)
            if self.full and self.ledger is not None:
                exposure = counterfactual.ledger_guard(self.ledger, exposure, params.min_exposure)
            exposure = max(exposure, params.min_exposure)
            if extra_cap is not None:
                # phase caps are hard ceilings, below the floor if need be
                exposure = min(exposure, extra_cap)
            self.seg = envelope.SegmentState(self.seg.segment_id, exposure, self.seg.history)
            pi = _sigmoid_arr(
                params.alpha - params.beta * self.pop.risk + params.gamma * ready - params.delta * penalty
            )
            admit_prob = np.where(eligible, exposure * pi, 0.0)
            if self.cf is not None:
                admit_prob = np.where(self.cf.shadow_mask, 0.0, admit_prob)
            if self.new_user_gate:
                admit_prob = np.where(self.pop.age_days < 30, 0.0, admit_prob)

        if self.governed and self.audit_log is not None and exposure != self.prev_exposure:
            self.audit_log.emit(
                day, "flag_transition", {"exposure": exposure, "policy": self.policy.value}
            )

        treated = frame.treat_uniform < admit_prob
        if self.policy is PolicyVariant.NAIVE:
            state_codes = np.where(treated, frame.target_code, 0)
            if attrs_drifting:
                violating = treated & violation_mask(frame, state_codes, kyc_now)
            else:
                violating = treated & frame.naive_violates_target
        else:
            state_codes = np.where(treated, frame.max_state_codes, 0)
            if attrs_drifting:
                # governed assignment re-gates: users failing now drop out
                bad = violation_mask(frame, state_codes, kyc_now)
                treated = treated & ~bad
                state_codes = np.where(treated, state_codes, 0)
            violating = np.zeros(self.n, dtype=bool)

        out = _draw_outcomes(scenario, frame, day, treated, state_codes, violating, self.conv_mult)
        self.retention.update(scenario, treated, violating, out.fraud, out.dropped)
        self.ever_treated |= treated
        self.conv_totals += out.converted.astype(np.int64)
        self.acc.absorb(treated, out)
        if self.governed:
            cell = self._experiment_cell(day, frame, kyc_now)
            if cell is not None:
                self.acc.absorb_experiment(scenario, day, cell[0], cell[1])

        n_treated = int(treated.sum())
        self.fraud_rate_window.append(float(out.fraud[treated].mean()) if n_treated else 0.0)

        si_today = 1.0 - float(violation_mask(frame, state_codes, kyc_now).mean())
        if self.audit_log is not None:
            viol_count = int(violating.sum())
            if viol_count > 0:
                self.audit_log.emit(
                    day, "invariant_violation", {"count": viol_count, "policy": self.policy.value}
                )

        ledger_balance_today: float | None = None
        if self.full and self.cf is not None and self.ledger is not None:
            ledger_balance_today = self._counterfactual_update(
                day, eligible, exposure, penalty, ready, treated, out, n_treated
            )

        by_cohort = tuple(
            float(treated[self.pop.cohort_codes == code].mean())
            if (self.pop.cohort_codes == code).any()
            else 0.0
            for code in range(len(COHORT_NAMES))
        )
        metrics = DailyMetrics(
            day=day,
            exposure=exposure,
            realized_exposure=float(treated.mean()),
            exposure_by_cohort=by_cohort,
            conversion=float(out.converted.mean()),
            retention_proxy=self.retention.proxy(),
            fraud_rate=float(out.fraud.mean()),
            compliance_fail_rate=float(out.compliance_fail.mean()),
            invariant_score=si_today,
            abuse_signal=abuse_signal,
            ledger_balance=ledger_balance_today,
            actions=(),
        )

        if self.governed:
            fired = apply_playbook(self.playbook, list(self.daily[-7:]) + [metrics])
            actions: list[str] = []
            for rule in fired:
                actions.append(rule.action.value)
                if rule.action is Action.FREEZE_AND_ROLLBACK_HALF:
                    lowered = max(self.seg.exposure * 0.5, params.min_exposure)
                    self.seg = envelope.SegmentState(self.seg.segment_id, lowered, self.seg.history)
                    self.freeze_until = day + 3
                elif rule.action is Action.DISABLE_ONRAMP_NEW_USERS:
                    self.new_user_gate = True
                elif rule.action is Action.SLOW_RAMP:
                    self.step_scale = 0.5
                elif rule.action is Action.REDUCE_ONRAMP_EXPOSURE:
                    lowered = max(self.seg.exposure * 0.8, params.min_exposure)
                    self.seg = envelope.SegmentState(self.seg.segment_id, lowered, self.seg.history)
                if self.audit_log is not None:
                    self.audit_log.emit(
                        day,
                        "playbook_action",
                        {"trigger": rule.trigger.value, "action": rule.action.value},
                    )
            if actions:
                metrics = replace(metrics, actions=tuple(actions))

        self.daily.append(metrics)
        if self.collect:
            self.sessions.append(
                DaySessions(
                    day=day,
                    state_codes=state_codes.astype(np.int32),
                    converted=out.converted.copy(),
                    fraud=out.fraud.copy(),
                    compliance_fail=out.compliance_fail.copy(),
                )
            )
        self.prev_states = state_codes
        self.prev_exposure = exposure
        return metrics

    def _counterfactual_update(
        self,
        day: int,
        eligible: np.ndarray,
        exposure: float,
        penalty: float,
        ready: float,
        treated: np.ndarray,
        out: _DayOutcomes,
        n_treated: int,
    ) -> float:
        assert self.cf is not None and self.ledger is not None
        cf, pop, params = self.cf, self.pop, self.params
        pi = _sigmoid_arr(
            params.alpha - params.beta * pop.risk + params.gamma * ready - params.delta * penalty
        )
        prop = np.clip(exposure * pi, 1e-6, 1.0 - 1e-6)
        shadow_idx = np.flatnonzero(cf.shadow_mask)
        weights = {f"u{i}": counterfactual.propensity_weight(float(prop[i])) for i in shadow_idx}
        cf.shadow_events.extend((f"u{i}", int(out.fraud[i])) for i in shadow_idx)
        try:
            shadow_rate = counterfactual.weighted_rate(cf.shadow_events, weights)
        except InsufficientDataError:
            shadow_rate = 0.0
        cf.cum_treated_sessions += n_treated
        cf.cum_treated_comp += int(out.compliance_fail[treated].sum())
        for code, buf in enumerate(cf.buffers):
            t_mask = treated & (pop.cohort_codes == code)
            s_mask = cf.shadow_mask & (pop.cohort_codes == code)
            buf.treated_sessions += int(t_mask.sum())
            buf.treated_fraud += int(out.fraud[t_mask].sum())
            buf.treated_comp += int(out.compliance_fail[t_mask].sum())
            buf.shadow_sessions += int(s_mask.sum())
            buf.shadow_fraud += int(out.fraud[s_mask].sum())
            if buf.treated_sessions >= _CF_ROW_MASS and buf.shadow_sessions > 0:
                phi = _risk_features(pop, pop.cohort_codes == code)
                t_n, s_n = buf.treated_sessions, buf.shadow_sessions
                cf.abuse_history.append(
                    (phi, buf.treated_fraud / t_n - buf.shadow_fraud / s_n)
                )
                cf.comp_history.append((phi, buf.treated_comp / t_n))
                buf.reset()
        if len(cf.abuse_history) >= 2 * counterfactual.CF_DIM:
            try:
                cf.abuse_model = counterfactual.fit_cf_weights(cf.abuse_history)
                cf.comp_model = counterfactual.fit_cf_weights(cf.comp_history)
            except (InsufficientDataError, EstimationError):
                pass  # keep previous weights until the design recovers
        candidates = eligible & ~cf.shadow_mask
        if candidates.any():
            phi_mean = _risk_features(pop, candidates)
            cf.abuse_cf = counterfactual.counterfactual_abuse(shadow_rate, cf.abuse_model, phi_mean)
            treated_comp = (
                cf.cum_treated_comp / cf.cum_treated_sessions if cf.cum_treated_sessions else 0.0
            )
            cf.comp_cf = max(0.0, treated_comp + cf.comp_model.predict(phi_mean))
        if shadow_idx.size and n_treated:
            result = counterfactual.overlap_check(prop[treated], prop[shadow_idx])
            cf.overlap_failed = not result.ok
        before = self.ledger
        self.ledger = counterfactual.ledger_step(before, exposure, cf.abuse_cf, cf.comp_cf)
        if self.audit_log is not None:
            self.audit_log.emit(
                day,
                "ledger_update",
                {
                    "balance_before": before.balance,
                    "balance_after": self.ledger.balance,
                    "exposure": exposure,
                    "abuse_cf": cf.abuse_cf,
                    "comp_cf": cf.comp_cf,
                    "replenish_rate": before.replenish_rate,
                    "lambda_comp": before.lambda_comp,
                    "balance_cap": before.balance_cap,
                },
            )
        return self.ledger.balance

    def finalize(self, catalog_width: int, readiness: tuple[float, ...]) -> RunReport:
        scenario = self.scenario
        retention_rng = np.random.default_rng((scenario.seed, _S_RETENTION))
        retained = retention_rng.random(self.n) < self.retention.probabilities()

        acc = self.acc
        total_sessions = self.n * len(self.daily)
        agg = Aggregates(
            conversion=(acc.conv_treated + acc.conv_control) / total_sessions,
            retention=float(retained.mean()),
            fraud_rate=(acc.fraud_treated + acc.fraud_control) / total_sessions,
            compliance_fail_rate=(acc.comp_treated + acc.comp_control) / total_sessions,
            mean_exposure=float(np.mean([m.exposure for m in self.daily])),
        )

        treated_idx = np.flatnonzero(self.ever_treated)
        control_idx = np.flatnonzero(~self.ever_treated)
        treated_samples = [
            causal.OutcomeSample(y=float(self.conv_totals[i]), x=float(self.pop.conv_covariate[i]))
            for i in treated_idx
        ]
        control_samples = [
            causal.OutcomeSample(y=float(self.conv_totals[i]), x=float(self.pop.conv_covariate[i]))
            for i in control_idx
        ]
        try:
            theta = causal.cuped_theta(treated_samples + control_samples)
            effect = causal.cuped_estimate(treated_samples, control_samples, theta)
        except (InsufficientDataError, EstimationError):
            effect = causal.EffectEstimate(tau=0.0, std_error=0.0, p_value=1.0)

        def _delta(t_num: int, c_num: int) -> float:
            if acc.n_treated == 0 or acc.n_control == 0:
                return 0.0
            return t_num / acc.n_treated - c_num / acc.n_control

        tau_ret = (
            float(retained[treated_idx].mean()) - float(retained[control_idx].mean())
            if treated_idx.size and control_idx.size
            else 0.0
        )
        score = causal.utility(
            _delta(acc.conv_treated, acc.conv_control),
            tau_ret,
            _delta(acc.fraud_treated, acc.fraud_control),
            _delta(acc.comp_treated, acc.comp_control),
            causal.UtilityWeights(*scenario.utility_weights),
        )

        return RunReport(
            policy=self.policy,
            seed=scenario.seed,
            daily=tuple(self.daily),
            aggregates=agg,
            effect=effect,
            utility_score=score,
            final_ledger_balance=self.ledger.balance if self.ledger is not None else None,
            catalog_width=catalog_width,
            retained=retained,
            sessions=tuple(self.sessions),
            risk_scores=self.pop.risk,
            readiness_by_day=readiness,
        )


def run_scenario(
    scenario: Scenario,
    policy: PolicyVariant,
    *,
    catalog: lattice.FeatureCatalog | None = None,
    rules: Sequence[lattice.InvariantRule] | None = None,
    controller: envelope.ControllerParams | None = None,
    alpha_schedule: envelope.AlphaSchedule | None = None,
    playbook: Sequence[PlaybookRule] | None = None,
    audit_log: AuditLog | None = None,
    collect_sessions: bool = True,
    frame: RolloutFrame | None = None,
) -> RunReport:
    """Run one policy over the scenario horizon and report the outcome."""
    catalog = catalog if catalog is not None else default_catalog()
    rules = tuple(rules) if rules is not None else default_rules()
    params = controller if controller is not None else envelope.ControllerParams()
    schedule = (
        alpha_schedule
        if alpha_schedule is not None
        else envelope.AlphaSchedule.uniform(0.05, scenario.horizon_days)
    )
    book = tuple(playbook) if playbook is not None else default_playbook()
    if frame is None:
        frame = RolloutFrame.build(scenario, catalog, rules)
    engine = _Engine(scenario, policy, frame, params, schedule, book, audit_log, collect_sessions)
    for day in range(1, scenario.horizon_days + 1):
        engine.step(day, frame)
    return engine.finalize(frame.catalog.width, scenario.readiness())


def run_ablation(
    scenario: Scenario,
    *,
    catalog: lattice.FeatureCatalog | None = None,
    rules: Sequence[lattice.InvariantRule] | None = None,
    controller: envelope.ControllerParams | None = None,
    collect_sessions: bool = False,
) -> dict[PolicyVariant, RunReport]:
    """All four policies on the same seed, sharing one sampled frame."""
    catalog = catalog if catalog is not None else default_catalog()
    rules = tuple(rules) if rules is not None else default_rules()
    frame = RolloutFrame.build(scenario, catalog, rules)
    return {
        policy: run_scenario(
            scenario,
            policy,
            catalog=catalog,
            rules=rules,
            controller=controller,
            frame=frame,
            collect_sessions=collect_sessions,
        )
        for policy in ABLATION_ORDER
    }


@dataclass(frozen=True)
class Phase:
    name: str
    features: tuple[str, ...]
    exposure_cap: float
    fraud_multiplier_bound: float
    retention_drop_bound: float
    compliance_multiplier_bound: float
    stability_days: int
    cohorts: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.exposure_cap <= 1.0):
            raise ConfigurationError("phase exposure_cap must lie in (0, 1]")
        if self.stability_days < 1:
            raise ConfigurationError("stability_days must be at least 1")
        if min(self.fraud_multiplier_bound, self.compliance_multiplier_bound) < 1.0:
            raise ConfigurationError("multiplier bounds below 1 would reject the baseline itself")


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]
    fraud_baseline: float = 0.0008
    compliance_baseline: float = 0.0002

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigurationError("phase plan needs at least one phase")
        caps = [p.exposure_cap for p in self.phases]
        if any(b < a for a, b in zip(caps, caps[1:])):
            raise ConfigurationError("phase exposure caps must be non-decreasing")
        if self.fraud_baseline <= 0 or self.compliance_baseline <= 0:
            raise ConfigurationError("phase baselines must be positive")


def default_phase_plan() -> PhasePlan:
    return PhasePlan(
        phases=(
            Phase(
                name="internal",
                features=("onramp",),
                exposure_cap=0.001,
                fraud_multiplier_bound=3.0,
                retention_drop_bound=0.05,
                compliance_multiplier_bound=5.0,
                stability_days=2,
                cohorts=("crypto_experienced",),
            ),
            Phase(
                name="onramp_canary",
                features=("onramp",),
                exposure_cap=0.01,
                fraud_multiplier_bound=1.5,
                retention_drop_bound=0.01,
                compliance_multiplier_bound=2.0,
                stability_days=3,
                cohorts=("crypto_experienced",),
            ),
            Phase(
                name="wallet_expansion",
                features=("onramp", "wallet"),
                exposure_cap=0.05,
                fraud_multiplier_bound=1.5,
                retention_drop_bound=0.01,
                compliance_multiplier_bound=2.0,
                stability_days=3,
                cohorts=None,
            ),
            Phase(
                name="advanced_view",
                features=("onramp", "wallet", "advanced_view"),
                exposure_cap=0.10,
                fraud_multiplier_bound=1.6,
                retention_drop_bound=0.01,
                compliance_multiplier_bound=2.5,
                stability_days=5,
                cohorts=None,
            ),
        )
    )


@dataclass(frozen=True)
class PhaseTransition:
    day: int
    from_phase: str
    to_phase: str
    cause: str
    exposure_cap: float


@dataclass(frozen=True)
class PhaseRunReport:
    daily: tuple[DailyMetrics, ...]
    transitions: tuple[PhaseTransition, ...]
    final_phase: str
    final_phase_index: int
    phase_by_day: tuple[int, ...]


def run_phase_plan(
    scenario: Scenario,
    plan: PhasePlan | None = None,
    *,
    catalog: lattice.FeatureCatalog | None = None,
    rules: Sequence[lattice.InvariantRule] | None = None,
    controller: envelope.ControllerParams | None = None,
    audit_log: AuditLog | None = None,
) -> PhaseRunReport:
    """Walk the staged plan under full governance, one day at a time.

    Advancement requires the exit criteria to hold for the phase's
    stability window, measured on cumulative in-phase rates. A fraud,
    retention, or compliance breach rolls the rollout back one phase
    and records the cause. Entering a phase that ships the
    education-gated view additionally requires a positive measured net
    lift from the education checkpoint.
    """
    plan = plan if plan is not None else default_phase_plan()
    catalog = catalog if catalog is not None else default_catalog()
    rules = tuple(rules) if rules is not None else default_rules()
    params = controller if controller is not None else envelope.ControllerParams()
    schedule = envelope.AlphaSchedule.uniform(0.05, scenario.horizon_days)

    pop = sample_population(scenario)
    base_frame = RolloutFrame.build(scenario, catalog, rules, None, pop=pop)
    engine = _Engine(
        scenario,
        PolicyVariant.FULL_GOVERNANCE,
        base_frame,
        params,
        schedule,
        default_playbook(),
        audit_log,
        collect_sessions=False,
    )
    frames: dict[int, RolloutFrame] = {}
    cohort_code = {name: i for i, name in enumerate(COHORT_NAMES)}

    idx = 0
    transitions: list[PhaseTransition] = []
    phase_by_day: list[int] = []
    in_phase: list[DailyMetrics] = []
    stable_days = 0

    for day in range(1, scenario.horizon_days + 1):
        phase = plan.phases[idx]
        if idx not in frames:
            frames[idx] = RolloutFrame.build(scenario, catalog, rules, phase.features, pop=pop)
        frame = frames[idx]
        override = None
        if phase.cohorts is not None:
            codes = [cohort_code[c] for c in phase.cohorts]
            override = np.isin(pop.cohort_codes, codes)
        metrics = engine.step(day, frame, extra_cap=phase.exposure_cap, eligible_override=override)
        phase_by_day.append(idx)
        in_phase.append(metrics)

        cum_fraud = float(np.mean([m.fraud_rate for m in in_phase]))
        cum_comp = float(np.mean([m.compliance_fail_rate for m in in_phase]))
        retention_drop = scenario.baseline_retention_30d - metrics.retention_proxy

        breach = None
        if cum_fraud > phase.fraud_multiplier_bound * plan.fraud_baseline:
            breach = "fraud exit criterion"
        elif retention_drop > phase.retention_drop_bound:
            breach = "retention exit criterion"
        elif cum_comp > phase.compliance_multiplier_bound * plan.compliance_baseline:
            breach = "compliance exit criterion"

        if breach is not None:
            if idx > 0:
                prev = plan.phases[idx - 1]
                transitions.append(
                    PhaseTransition(
                        day=day,
                        from_phase=phase.name,
                        to_phase=prev.name,
                        cause=breach,
                        exposure_cap=prev.exposure_cap,
                    )
                )
                if audit_log is not None:
                    audit_log.emit(
                        day,
                        "phase_transition",
                        {"from": phase.name, "to": prev.name, "cause": breach},
                    )
                idx -= 1
            in_phase = []
            stable_days = 0
            continue

        stable_days += 1
        if stable_days >= phase.stability_days and idx < len(plan.phases) - 1:
            nxt = plan.phases[idx + 1]
            gate_ok = True
            if "advanced_view" in nxt.features and "advanced_view" not in phase.features:
                acc = engine.acc
                q = (
                    1.0 - acc.edu_drops / acc.edu_encounters
                    if acc.edu_encounters
                    else 1.0 - scenario.education_drop_rate
                )
                net = causal.education_net_lift(
                    q, scenario.treatment_conv_lift_abs, scenario.baseline_conversion
                )
                gate_ok = net > 0.0
            if gate_ok:
                transitions.append(
                    PhaseTransition(
                        day=day,
                        from_phase=phase.name,
                        to_phase=nxt.name,
                        cause="criteria satisfied",
                        exposure_cap=nxt.exposure_cap,
                    )
                )
                if audit_log is not None:
                    audit_log.emit(
                        day,
                        "phase_transition",
                        {"from": phase.name, "to": nxt.name, "cause": "criteria satisfied"},
                    )
                idx += 1
                in_phase = []
                stable_days = 0

    final = plan.phases[idx]
    return PhaseRunReport(
        daily=tuple(engine.daily),
        transitions=tuple(transitions),
        final_phase=final.name,
        final_phase_index=idx,
        phase_by_day=tuple(phase_by_day),
    )


def emit_telemetry(report: RunReport) -> Iterator[TelemetryEvent]:
    """One event per sampled session, streamed in day then user order.

    Unexposed sessions carry the all-zero flag state rather than being
    skipped, so downstream consumers see the full denominator.
    """
    if not report.sessions:
        raise InsufficientDataError("run was executed without session collection")
    width = report.catalog_width
    state_cache: dict[int, lattice.FlagState] = {}
    readiness = report.readiness_by_day
    for day_sessions in report.sessions:
        ready = readiness[day_sessions.day - 1] if readiness else 1.0
        for i in range(day_sessions.state_codes.size):
            code = int(day_sessions.state_codes[i])
            if code not in state_cache:
                state_cache[code] = lattice.FlagState.from_int(code, width)
            risk = float(report.risk_scores[i]) if report.risk_scores is not None else 0.0
            yield TelemetryEvent(
                session_id=f"u{i}-d{day_sessions.day}",
                flag_state=state_cache[code],
                risk_score_at_decision=risk,
                compliance_readiness=float(ready),
                conversion_marker=bool(day_sessions.converted[i]),
                retention_marker=bool(report.retained[i]),
                abuse_signal=bool(day_sessions.fraud[i]),
            )
