"""Counterfactual abuse estimation and the risk-budget ledger.

A shadow cohort of held-out users, reweighted by propensity odds,
anchors what the treated population's abuse rate would look like
without treatment. A small linear model over cohort risk features
adds the predicted residual, and the resulting counterfactual rate
drains a replenishing risk ledger that gates further ramping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, EstimationError, InsufficientDataError

# Risk features carried per cohort slice; the fitted model must match.
CF_DIM = 3


@dataclass(frozen=True)
class RiskFeatureVector:
    """Cohort-level risk features: trust, tenure, dispute history."""

    device_trust: float
    account_age_norm: float
    prior_disputes: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.device_trust, self.account_age_norm, self.prior_disputes], dtype=float
        )


@dataclass(frozen=True)
class CfModel:
    """Least-squares weights mapping risk features to an abuse residual."""

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.weights)
        if len(w) != CF_DIM:
            raise ConfigurationError(f"cf model needs {CF_DIM} weights, got {len(w)}")
        object.__setattr__(self, "weights", w)

    def predict(self, phi: RiskFeatureVector) -> float:
        return float(np.dot(self.weights, phi.as_array()))


@dataclass(frozen=True)
class ShadowCohort:
    """Held-out users, never treated in the rollout they shadow."""

    members: tuple[str, ...]
    weights: Mapping[str, float]
    propensities: Mapping[str, float]

    def __post_init__(self) -> None:
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        weights = dict(self.weights)
        props = dict(self.propensities)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "propensities", props)
        member_set = set(members)
        if len(member_set) != len(members):
            raise ConfigurationError("shadow cohort has duplicate members")
        if set(weights) != member_set or set(props) != member_set:
            raise ConfigurationError("shadow weights/propensities must cover every member")
        for uid, w in weights.items():
            if not math.isfinite(w) or w <= 0:
                raise ConfigurationError(f"shadow weight for {uid!r} must be positive and finite")
        for uid, p in props.items():
            if not (0.0 < p < 1.0):
                raise ConfigurationError(f"shadow propensity for {uid!r} must lie in (0, 1)")

    def assert_disjoint(self, treated_ids: set[str]) -> None:
        overlap = set(self.members) & treated_ids
        if overlap:
            raise ConfigurationError(
                f"shadow members appear in the treated cohort: {sorted(overlap)[:5]}"
            )


@dataclass(frozen=True)
class RiskLedger:
    """Replenishing budget that counterfactual abuse spends down.

    The balance may go negative; callers gate on the sign rather than
    treating debt as an error.
    """

    balance: float
    replenish_rate: float = 0.01
    lambda_comp: float = 1.0
    balance_cap: float = 1.0

    def __post_init__(self) -> None:
        if self.replenish_rate < 0:
            raise ConfigurationError("replenish_rate must be non-negative")
        if self.lambda_comp < 0:
            raise ConfigurationError("lambda_comp must be non-negative")
        if self.balance_cap <= 0:
            raise ConfigurationError("balance_cap must be positive")


def propensity_weight(p: float) -> float:
    """Odds weight for a shadow member with treatment propensity ``p``."""
    if not (0.0 < p < 1.0):
        raise EstimationError(f"degenerate propensity {p}; weights need p strictly inside (0, 1)")
    return p / (1.0 - p)


def weighted_rate(events: Sequence[tuple[str, int]], weights: Mapping[str, float]) -> float:
    """Weighted mean of binary events; every event user must carry a weight."""
    if not events:
        raise InsufficientDataError("no events to average")
    num = 0.0
    den = 0.0
    for uid, indicator in events:
        w = weights[uid]
        num += w * float(indicator)
        den += w
    return num / den


def fit_cf_weights(
    history: Sequence[tuple[RiskFeatureVector, float]],
) -> CfModel:
    """Least-squares fit of abuse residuals on risk features.

    Needs at least ``CF_DIM + 1`` observations and a full-rank design
    matrix; otherwise the fit would be underdetermined and the error
    carries the singular values for diagnosis.
    """
    if len(history) < CF_DIM + 1:
        raise InsufficientDataError(
            f"need at least {CF_DIM + 1} observations to fit, got {len(history)}"
        )
    x = np.stack([phi.as_array() for phi, _ in history])
    y = np.array([resid for _, resid in history], dtype=float)
    solution, _, rank, svals = np.linalg.lstsq(x, y, rcond=None)
    if rank < CF_DIM:
        raise EstimationError(
            f"rank-deficient design (rank {rank} < {CF_DIM}); singular values {svals.tolist()}"
        )
    return CfModel(weights=tuple(float(w) for w in solution))


def counterfactual_abuse(shadow_rate: float, model: CfModel, phi_mean: RiskFeatureVector) -> float:
    """Shadow anchor plus modeled residual, clamped to a legal rate."""
    if shadow_rate < 0:
        raise ValueError("shadow_rate must be non-negative")
    return max(0.0, shadow_rate + model.predict(phi_mean))


def ledger_step(
    ledger: RiskLedger, exposure: float, abuse_cf: float, comp_cf: float
) -> RiskLedger:
    """One day's ledger update: spend on predicted harm, replenish, cap."""
    if not (0.0 <= exposure <= 1.0):
        raise ValueError("exposure must lie in [0, 1]")
    if abuse_cf < 0 or comp_cf < 0:
        raise ValueError("counterfactual rates must be non-negative")
    new_balance = min(
        ledger.balance
        - exposure * abuse_cf
        - ledger.lambda_comp * comp_cf
        + ledger.replenish_rate,
        ledger.balance_cap,
    )
    return RiskLedger(
        balance=new_balance,
        replenish_rate=ledger.replenish_rate,
        lambda_comp=ledger.lambda_comp,
        balance_cap=ledger.balance_cap,
    )


def ledger_guard(ledger: RiskLedger, exposure: float, min_exposure: float) -> float:
    """Halve exposure while the ledger is in debt, floored at min_exposure."""
    if ledger.balance < 0.0:
        return max(exposure * 0.5, min_exposure)
    return exposure


@dataclass(frozen=True)
class OverlapResult:
    coefficient: float
    threshold: float
    ok: bool


def overlap_check(
    treated_propensities: Sequence[float],
    shadow_propensities: Sequence[float],
    threshold: float = 0.5,
) -> OverlapResult:
    """Histogram overlap between treated and shadow propensity distributions.

    Twenty equal-width bins on [0, 1]; each histogram is normalized to
    unit mass and the coefficient is the summed bin-wise minimum. A
    coefficient below the threshold means the shadow cohort no longer
    resembles the treated population and counterfactual output should
    not be trusted.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ConfigurationError("overlap threshold must lie in [0, 1]")
    treated = np.asarray(treated_propensities, dtype=float)
    shadow = np.asarray(shadow_propensities, dtype=float)
    if treated.size == 0 or shadow.size == 0:
        raise InsufficientDataError("both propensity samples must be non-empty")
    for arr, name in ((treated, "treated"), (shadow, "shadow")):
        if ((arr < 0) | (arr > 1)).any():
            raise ValueError(f"{name} propensities must lie in [0, 1]")
    bins = np.linspace(0.0, 1.0, 21)
    t_hist, _ = np.histogram(treated, bins=bins)
    s_hist, _ = np.histogram(shadow, bins=bins)
    t_mass = t_hist / t_hist.sum()
    s_mass = s_hist / s_hist.sum()
    coefficient = float(np.minimum(t_mass, s_mass).sum())
    return OverlapResult(coefficient=coefficient, threshold=threshold, ok=coefficient >= threshold)
