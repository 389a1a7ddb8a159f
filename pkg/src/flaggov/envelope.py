"""Safety envelope, exposure controller, and fraud budget arithmetic.

The controller turns risk and readiness signals into a per-user
admission probability, bounds segment exposure by a decaying envelope,
and ramps exposure up or down one step per scheduling round. Alpha
spending rations the false-positive budget across repeated ramp
decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigurationError, ScheduleExhaustedError, UndefinedCapError


@dataclass(frozen=True)
class ControllerParams:
    """Coefficients for the exposure controller and envelope."""

    alpha: float = 2.0
    beta: float = 2.0
    gamma: float = 0.5
    delta: float = 1.0
    e_max: float = 0.5
    kappa: float = 150.0
    budget_target: float = 1.0
    eta: float = 1.0
    step: float = 0.02
    min_exposure: float = 0.01
    invariant_floor: float = 0.995

    def __post_init__(self) -> None:
        for name in ("beta", "gamma", "delta", "kappa"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not (0.0 < self.e_max <= 1.0):
            raise ConfigurationError("e_max must lie in (0, 1]")
        if self.budget_target <= 0:
            raise ConfigurationError("budget_target must be positive")
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive")
        if not (0.0 < self.step < 1.0):
            raise ConfigurationError("step must lie in (0, 1)")
        if self.min_exposure < 0 or self.min_exposure > self.e_max:
            raise ConfigurationError("min_exposure must lie in [0, e_max]")
        if not (0.0 <= self.invariant_floor <= 1.0):
            raise ConfigurationError("invariant_floor must lie in [0, 1]")


@dataclass(frozen=True)
class SafetySignals:
    """One scheduling round's inputs, all observed the same day."""

    abuse_rate: float
    budget: float
    compliance_readiness: float
    invariant_score: float
    safety_penalty: float = 0.0

    def __post_init__(self) -> None:
        if self.abuse_rate < 0:
            raise ValueError("abuse_rate must be non-negative")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if not (0.0 <= self.compliance_readiness <= 1.0):
            raise ValueError("compliance_readiness must lie in [0, 1]")
        if not (0.0 <= self.invariant_score <= 1.0):
            raise ValueError("invariant_score must lie in [0, 1]")
        if self.safety_penalty < 0:
            raise ValueError("safety_penalty must be non-negative")


@dataclass(frozen=True)
class ExposureRecord:
    day: int
    exposure: float
    signals: SafetySignals | None = None


@dataclass(frozen=True)
class SegmentState:
    """Current exposure for one rollout segment plus its update history."""

    segment_id: str
    exposure: float
    history: tuple[ExposureRecord, ...] = field(default_factory=tuple)


def _sigmoid(x: float) -> float:
    # split on sign to avoid overflow in exp
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def exposure_probability(
    params: ControllerParams, risk: float, compliance: float, safety: float
) -> float:
    """Per-user admission probability: logistic in risk, readiness, and penalty."""
    return _sigmoid(params.alpha - params.beta * risk + params.gamma * compliance - params.delta * safety)


def safety_penalty(
    invariant_score: float,
    abuse_rate: float,
    invariant_weight: float,
    abuse_weight: float,
) -> float:
    """Scalar penalty fed to the controller: weighted invariant gap plus abuse."""
    if invariant_weight < 0 or abuse_weight < 0:
        raise ConfigurationError("penalty weights must be non-negative")
    return invariant_weight * (1.0 - invariant_score) + abuse_weight * abuse_rate


def envelope_cap(params: ControllerParams, abuse_rate: float, budget: float) -> float:
    """Maximum allowed exposure given current abuse and remaining budget."""
    if abuse_rate < 0:
        raise ValueError("abuse_rate must be non-negative")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    budget_factor = min(1.0, budget / params.budget_target)
    return params.e_max * math.exp(-params.kappa * abuse_rate) * budget_factor


def within_envelope(
    params: ControllerParams,
    signals: SafetySignals,
    exposure: float,
    ledger_balance: float = 0.0,
) -> bool:
    """Envelope check used by the scheduler.

    Holds when exposure sits at or below the cap, the risk ledger is
    not in debt, and the invariant score clears the ramp floor.
    """
    cap = envelope_cap(params, signals.abuse_rate, signals.budget)
    return (
        exposure <= cap
        and ledger_balance >= 0.0
        and signals.invariant_score >= params.invariant_floor
    )


def step_exposure(seg: SegmentState, delta: float, params: ControllerParams) -> SegmentState:
    """Apply one proportional-control step, clamped to the legal range."""
    new = seg.exposure + params.eta * delta
    new = min(max(new, params.min_exposure), params.e_max)
    record = ExposureRecord(day=len(seg.history), exposure=new)
    return SegmentState(seg.segment_id, new, seg.history + (record,))


def schedule_update(
    seg: SegmentState,
    signals: SafetySignals,
    envelope_ok: bool,
    uplift_ok: bool,
    params: ControllerParams,
) -> SegmentState:
    """One scheduling round.

    Branch priority is fixed: an invariant score below the floor halves
    exposure no matter what the other gates say; otherwise exposure
    steps up only when both the envelope and the uplift gate pass, and
    steps down in every remaining case.
    """
    if signals.invariant_score < params.invariant_floor:
        new = max(seg.exposure * 0.5, params.min_exposure)
    elif envelope_ok and uplift_ok:
        cap = envelope_cap(params, signals.abuse_rate, signals.budget)
        new = min(seg.exposure + params.step, cap)
        new = max(new, params.min_exposure)
    else:
        new = max(seg.exposure - params.step, params.min_exposure)
    new = min(new, params.e_max)
    record = ExposureRecord(day=len(seg.history), exposure=new, signals=signals)
    return SegmentState(seg.segment_id, new, seg.history + (record,))


def ramp_decision(
    uplift_conv: float,
    fraud_delta: float,
    lambda_risk: float,
    p_value: float,
    alpha_t: float,
) -> bool:
    """Ramp only on a strictly positive risk-adjusted uplift that is
    significant at this round's alpha allotment."""
    if lambda_risk < 0:
        raise ConfigurationError("lambda_risk must be non-negative")
    net = uplift_conv - lambda_risk * fraud_delta
    return net > 0.0 and p_value < alpha_t


@dataclass(frozen=True)
class AlphaSchedule:
    """Total error budget split across decision times; spent fractions never
    sum past one."""

    alpha_total: float
    fractions: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha_total < 1.0):
            raise ConfigurationError("alpha_total must lie in (0, 1)")
        fracs = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fracs)
        if not fracs:
            raise ConfigurationError("alpha schedule needs at least one period")
        if any(f < 0 for f in fracs):
            raise ConfigurationError("alpha fractions must be non-negative")
        if sum(fracs) > 1.0 + 1e-12:
            raise ConfigurationError("alpha fractions must sum to at most 1")

    @classmethod
    def geometric(cls, alpha_total: float, periods: int, ratio: float = 0.5) -> AlphaSchedule:
        if periods < 1:
            raise ConfigurationError("periods must be at least 1")
        if not (0.0 < ratio < 1.0):
            raise ConfigurationError("ratio must lie in (0, 1)")
        raw = [ratio**t for t in range(1, periods + 1)]
        total = sum(raw)
        if total > 1.0:
            raw = [x / total for x in raw]
        return cls(alpha_total, tuple(raw))

    @classmethod
    def uniform(cls, alpha_total: float, periods: int) -> AlphaSchedule:
        if periods < 1:
            raise ConfigurationError("periods must be at least 1")
        return cls(alpha_total, (1.0 / periods,) * periods)

    def spend(self, t: int) -> float:
        """Alpha allotted to decision time ``t`` (1-indexed)."""
        if t < 1:
            raise ValueError("decision times are 1-indexed")
        if t > len(self.fractions):
            raise ScheduleExhaustedError(
                f"decision time {t} exceeds the {len(self.fractions)}-period schedule"
            )
        return self.alpha_total * self.fractions[t - 1]


def alpha_spend(schedule: AlphaSchedule, t: int) -> float:
    return schedule.spend(t)


def expected_fraud_sessions(n_sessions: float, exposure: float, fraud_prob: float) -> float:
    """Expected fraudulent sessions at a given exposure level."""
    if n_sessions < 0:
        raise ValueError("n_sessions must be non-negative")
    if not (0.0 <= exposure <= 1.0):
        raise ValueError("exposure must lie in [0, 1]")
    if not (0.0 <= fraud_prob <= 1.0):
        raise ValueError("fraud_prob must lie in [0, 1]")
    return n_sessions * exposure * fraud_prob


def exposure_cap_from_budget(n_sessions: float, fraud_prob: float, fraud_budget: float) -> float:
    """Largest exposure whose expected fraud stays inside the budget."""
    if n_sessions <= 0:
        raise ValueError("n_sessions must be positive")
    if not (0.0 <= fraud_prob <= 1.0):
        raise ValueError("fraud_prob must lie in [0, 1]")
    if fraud_budget < 0:
        raise ValueError("fraud_budget must be non-negative")
    if fraud_prob == 0.0:
        raise UndefinedCapError(
            "fraud probability is zero; the budget implies no cap, use e_max"
        )
    return min(1.0, fraud_budget / (n_sessions * fraud_prob))
