"""Causal effect measurement for rollout decisions.

Covariate-adjusted treatment effects (CUPED), multiple-testing
control across guardrail metrics, and the composite utility that
weighs conversion gains against retention, fraud, and compliance
movements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, EstimationError, InsufficientDataError


@dataclass(frozen=True)
class OutcomeSample:
    """One unit's outcome ``y`` and pre-period covariate ``x``."""

    y: float
    x: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.y) and math.isfinite(self.x)):
            raise ValueError("outcome and covariate must be finite")


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate with its standard error and two-sided p-value."""

    tau: float
    std_error: float
    p_value: float

    def __post_init__(self) -> None:
        if self.std_error < 0:
            raise ValueError("std_error must be non-negative")
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError("p_value must lie in [0, 1]")


@dataclass(frozen=True)
class UtilityWeights:
    lambda_ret: float
    lambda_fraud: float
    lambda_comp: float

    def __post_init__(self) -> None:
        if min(self.lambda_ret, self.lambda_fraud, self.lambda_comp) < 0:
            raise ConfigurationError("utility weights must be non-negative")


def _normal_two_sided_p(z: float) -> float:
    # 2 * (1 - Phi(|z|)) via the complementary error function
    return math.erfc(abs(z) / math.sqrt(2.0))


def cuped_theta(samples: Sequence[OutcomeSample]) -> float:
    """Pooled adjustment coefficient: cov(x, y) / var(x).

    Computed over both arms together so the same theta applies to each.

    Args:
        samples: pooled treatment and control samples.

    Returns:
        The variance-minimizing linear adjustment coefficient.

    Raises:
        InsufficientDataError: fewer than two samples.
        EstimationError: the covariate is constant, so no adjustment
            is identified.
    """
    if len(samples) < 2:
        raise InsufficientDataError("cuped_theta needs at least two samples")
    x = np.array([s.x for s in samples], dtype=float)
    y = np.array([s.y for s in samples], dtype=float)
    var_x = float(np.var(x, ddof=1))
    if var_x == 0.0:
        raise EstimationError("degenerate covariate: var(x) is zero")
    cov_xy = float(np.cov(x, y, ddof=1)[0, 1])
    return cov_xy / var_x


def _adjusted_stats(samples: Sequence[OutcomeSample], theta: float) -> tuple[float, float, int]:
    adj = np.array([s.y - theta * s.x for s in samples], dtype=float)
    n = adj.size
    var = float(np.var(adj, ddof=1)) if n >= 2 else 0.0
    return float(adj.mean()), var, n


def cuped_estimate(
    treated: Sequence[OutcomeSample],
    control: Sequence[OutcomeSample],
    theta: float,
) -> EffectEstimate:
    """Difference in covariate-adjusted means with a Welch standard error.

    The estimate is mean(y - theta * x) over treated minus the same
    over control; the p-value is two-sided normal. With theta = 0 this
    reduces exactly to the plain difference in means.

    Raises:
        InsufficientDataError: either group is empty.
    """
    if not treated or not control:
        raise InsufficientDataError("both groups must be non-empty")
    mean_t, var_t, n_t = _adjusted_stats(treated, theta)
    mean_c, var_c, n_c = _adjusted_stats(control, theta)
    tau = mean_t - mean_c
    se = math.sqrt(var_t / n_t + var_c / n_c)
    if se == 0.0:
        p = 1.0 if tau == 0.0 else 0.0
    else:
        p = _normal_two_sided_p(tau / se)
    return EffectEstimate(tau=tau, std_error=se, p_value=p)


def utility(
    tau_conv: float,
    tau_ret: float,
    tau_fraud: float,
    tau_comp: float,
    weights: UtilityWeights,
) -> float:
    """Composite decision utility: conversion plus weighted retention,
    minus weighted fraud and compliance effects."""
    return (
        tau_conv
        + weights.lambda_ret * tau_ret
        - weights.lambda_fraud * tau_fraud
        - weights.lambda_comp * tau_comp
    )


def interaction_effect(means: Mapping[tuple[int, int], float]) -> float:
    """Two-feature interaction from a 2x2 table of mean outcomes.

    Positive means the features reinforce each other beyond their
    separate effects.

    Raises:
        InsufficientDataError: any of the four cells is missing.
    """
    cells = {}
    for key in ((0, 0), (0, 1), (1, 0), (1, 1)):
        if key not in means:
            raise InsufficientDataError(f"missing cell {key} in interaction table")
        cells[key] = float(means[key])
    return cells[(1, 1)] - cells[(1, 0)] - cells[(0, 1)] + cells[(0, 0)]


def bh_adjust(p_values: Sequence[float], q: float) -> set[int]:
    """Benjamini-Hochberg step-up selection.

    Args:
        p_values: raw p-values in their original order.
        q: target false discovery rate, in (0, 1).

    Returns:
        Indices (into the original list) of rejected hypotheses.
    """
    if not (0.0 < q < 1.0):
        raise ConfigurationError("q must lie in (0, 1)")
    ps = [float(p) for p in p_values]
    for p in ps:
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"p-value out of [0, 1]: {p}")
    m = len(ps)
    if m == 0:
        return set()
    order = sorted(range(m), key=lambda i: ps[i])
    k_star = 0
    for rank, idx in enumerate(order, start=1):
        if ps[idx] <= rank * q / m:
            k_star = rank
    return set(order[:k_star])


def education_net_lift(q: float, delta_conv: float, delta_friction: float) -> float:
    """Net benefit of an education checkpoint.

    ``q`` is the completion fraction; completers contribute the
    conversion delta, non-completers pay the friction cost.
    """
    if not (0.0 <= q <= 1.0):
        raise ValueError("q must lie in [0, 1]")
    return q * delta_conv - (1.0 - q) * delta_friction


def two_proportion_test(
    successes_t: int, n_t: int, successes_c: int, n_c: int
) -> EffectEstimate:
    """Two-sided pooled-variance z-test for a difference in proportions.

    Equal observed proportions give p = 1.0 by construction (z = 0),
    including the all-zero and all-one degenerate pools.

    Raises:
        InsufficientDataError: an arm has no sessions.
        ValueError: successes exceed trials or are negative.
    """
    if n_t <= 0 or n_c <= 0:
        raise InsufficientDataError("both arms need at least one session")
    for s, n in ((successes_t, n_t), (successes_c, n_c)):
        if s < 0 or s > n:
            raise ValueError(f"successes {s} outside [0, {n}]")
    p_t = successes_t / n_t
    p_c = successes_c / n_c
    pool = (successes_t + successes_c) / (n_t + n_c)
    se = math.sqrt(pool * (1.0 - pool) * (1.0 / n_t + 1.0 / n_c))
    tau = p_t - p_c
    if se == 0.0:
        # pooled rate 0 or 1 forces both arms equal
        return EffectEstimate(tau=tau, std_error=0.0, p_value=1.0)
    return EffectEstimate(tau=tau, std_error=se, p_value=_normal_two_sided_p(tau / se))


def mc_standard_error(values: Iterable[float]) -> float:
    """Standard error of a Monte Carlo mean, used by calibration checks."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size < 2:
        raise InsufficientDataError("need at least two replicates")
    return float(arr.std(ddof=1) / math.sqrt(arr.size))
