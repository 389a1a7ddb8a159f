"""Feature dependency lattice and invariant rules.

Flag states are fixed-length binary vectors over an ordered feature
catalog. A state is valid when every enabled feature has all of its
prerequisites enabled. The set of valid states is closed under
element-wise meet and join, which is what makes partial rollback a
well-defined operation instead of an ad-hoc scramble.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError

# Exhaustive state enumeration is 2^n; past this the lattice is not
# auditable by brute force, so we refuse to build it.
MAX_FEATURES = 20


class Cohort(Enum):
    CRYPTO_EXPERIENCED = "crypto_experienced"
    NEUTRAL = "neutral"
    LOW_TRUST = "low_trust"


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered feature names plus a direct-prerequisite map."""

    features: tuple[str, ...]
    prerequisites: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        feats = tuple(self.features)
        object.__setattr__(self, "features", feats)
        if len(feats) > MAX_FEATURES:
            raise ConfigurationError(
                f"catalog has {len(feats)} features; limit is {MAX_FEATURES}"
            )
        if len(set(feats)) != len(feats):
            raise ConfigurationError("duplicate feature names in catalog")
        prereqs: dict[str, frozenset[str]] = {}
        for name, deps in dict(self.prerequisites).items():
            if name not in feats:
                raise ConfigurationError(f"prerequisite entry for unknown feature {name!r}")
            deps = frozenset(deps)
            for dep in deps:
                if dep not in feats:
                    raise ConfigurationError(
                        f"feature {name!r} lists unknown prerequisite {dep!r}"
                    )
            if name in deps:
                raise ConfigurationError(f"feature {name!r} is its own prerequisite")
            prereqs[name] = deps
        object.__setattr__(self, "prerequisites", prereqs)
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        # Kahn's algorithm; anything left over sits on a cycle.
        indegree = {f: len(self.prerequisites.get(f, frozenset())) for f in self.features}
        dependents: dict[str, list[str]] = {f: [] for f in self.features}
        for name, deps in self.prerequisites.items():
            for dep in deps:
                dependents[dep].append(name)
        queue = [f for f in self.features if indegree[f] == 0]
        seen = 0
        while queue:
            feat = queue.pop()
            seen += 1
            for child in dependents[feat]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    queue.append(child)
        if seen != len(self.features):
            cyclic = sorted(f for f in self.features if indegree[f] > 0)
            raise ConfigurationError(f"prerequisite cycle involving {cyclic}")

    @property
    def width(self) -> int:
        return len(self.features)

    def index(self, feature: str) -> int:
        try:
            return self.features.index(feature)
        except ValueError:
            raise ConfigurationError(f"unknown feature {feature!r}") from None

    def prereq_masks(self) -> tuple[int, ...]:
        """Per-feature bitmask of direct prerequisites, in feature order."""
        masks = []
        for feat in self.features:
            mask = 0
            for dep in self.prerequisites.get(feat, frozenset()):
                mask |= 1 << self.features.index(dep)
            masks.append(mask)
        return tuple(masks)


@dataclass(frozen=True, order=True)
class FlagState:
    """One point in the lattice: a tuple of 0/1 flags in catalog order."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"flag bits must be 0 or 1, got {self.bits!r}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def zero(cls, width: int) -> FlagState:
        return cls((0,) * width)

    @classmethod
    def from_int(cls, value: int, width: int) -> FlagState:
        return cls(tuple((value >> i) & 1 for i in range(width)))

    @classmethod
    def from_features(cls, catalog: FeatureCatalog, enabled: Iterable[str]) -> FlagState:
        bits = [0] * catalog.width
        for name in enabled:
            bits[catalog.index(name)] = 1
        return cls(tuple(bits))

    def as_int(self) -> int:
        value = 0
        for i, b in enumerate(self.bits):
            value |= b << i
        return value

    def enabled(self, catalog: FeatureCatalog) -> tuple[str, ...]:
        return tuple(f for f, b in zip(catalog.features, self.bits) if b)

    def has(self, catalog: FeatureCatalog, feature: str) -> bool:
        return bool(self.bits[catalog.index(feature)])

    def bitstring(self) -> str:
        return "".join(str(b) for b in self.bits)


class Predicate(Enum):
    KYC_REQUIRED = "kyc_required"
    RISK_BELOW = "risk_below"
    REQUIRES_FEATURES = "requires_features"


@dataclass(frozen=True)
class InvariantRule:
    """States enabling ``guard_feature`` must satisfy the predicate."""

    rule_id: str
    guard_feature: str
    predicate: Predicate
    threshold: float | None = None
    required: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "required", frozenset(self.required))
        if self.predicate is Predicate.RISK_BELOW:
            if self.threshold is None or not (0.0 < self.threshold <= 1.0):
                raise ConfigurationError(
                    f"rule {self.rule_id!r}: risk threshold must lie in (0, 1]"
                )
        elif self.threshold is not None:
            raise ConfigurationError(
                f"rule {self.rule_id!r}: threshold only applies to risk_below"
            )
        if self.predicate is Predicate.REQUIRES_FEATURES:
            if not self.required:
                raise ConfigurationError(
                    f"rule {self.rule_id!r}: requires_features needs a non-empty set"
                )
        elif self.required:
            raise ConfigurationError(
                f"rule {self.rule_id!r}: required set only applies to requires_features"
            )


def kyc_required(rule_id: str, guard_feature: str) -> InvariantRule:
    return InvariantRule(rule_id, guard_feature, Predicate.KYC_REQUIRED)


def risk_below(rule_id: str, guard_feature: str, threshold: float) -> InvariantRule:
    return InvariantRule(rule_id, guard_feature, Predicate.RISK_BELOW, threshold=threshold)


def requires_features(rule_id: str, guard_feature: str, required: Iterable[str]) -> InvariantRule:
    return InvariantRule(
        rule_id, guard_feature, Predicate.REQUIRES_FEATURES, required=frozenset(required)
    )


@dataclass(frozen=True)
class UserContext:
    """Per-user attributes the invariant rules read."""

    user_id: str
    kyc_verified: bool
    risk_score: float
    device_trust: float
    account_age_days: int
    cohort: Cohort
    prior_paid_activity: bool

    def __post_init__(self) -> None:
        if not (0.0 <= self.risk_score <= 1.0):
            raise ValueError(f"risk_score out of [0, 1]: {self.risk_score}")
        if not (0.0 <= self.device_trust <= 1.0):
            raise ValueError(f"device_trust out of [0, 1]: {self.device_trust}")
        if self.account_age_days < 0:
            raise ValueError(f"account_age_days negative: {self.account_age_days}")


@dataclass(frozen=True)
class Decision:
    allow: bool
    violations: tuple[str, ...]


@dataclass(frozen=True)
class LatticeGraph:
    """All valid states plus the single-feature upgrade edges."""

    states: tuple[FlagState, ...]
    edges: tuple[tuple[FlagState, FlagState], ...]


def is_valid_state(catalog: FeatureCatalog, state: FlagState) -> bool:
    """True when every enabled feature has its prerequisites enabled."""
    if len(state.bits) != catalog.width:
        raise ValueError(
            f"state width {len(state.bits)} does not match catalog width {catalog.width}"
        )
    value = state.as_int()
    for i, mask in enumerate(catalog.prereq_masks()):
        if (value >> i) & 1 and (value & mask) != mask:
            return False
    return True


def enumerate_valid_states(catalog: FeatureCatalog) -> tuple[FlagState, ...]:
    """Every prerequisite-consistent state, ordered by integer encoding."""
    masks = catalog.prereq_masks()
    width = catalog.width
    out = []
    for value in range(1 << width):
        ok = True
        for i in range(width):
            if (value >> i) & 1 and (value & masks[i]) != masks[i]:
                ok = False
                break
        if ok:
            out.append(FlagState.from_int(value, width))
    return tuple(out)


def build_upgrade_edges(
    states: Sequence[FlagState],
) -> tuple[tuple[FlagState, FlagState], ...]:
    """Directed edges between valid states that differ by one added feature."""
    if not states:
        return ()
    width = len(states[0].bits)
    by_int = {s.as_int(): s for s in states}
    edges = []
    for value in sorted(by_int):
        for i in range(width):
            if not (value >> i) & 1:
                upper = value | (1 << i)
                if upper in by_int:
                    edges.append((by_int[value], by_int[upper]))
    return tuple(edges)


def meet(a: FlagState, b: FlagState) -> FlagState:
    """Element-wise minimum: the largest state below both."""
    if len(a.bits) != len(b.bits):
        raise ValueError("meet of states with different widths")
    return FlagState(tuple(min(x, y) for x, y in zip(a.bits, b.bits)))


def join(a: FlagState, b: FlagState) -> FlagState:
    """Element-wise maximum: the smallest state above both."""
    if len(a.bits) != len(b.bits):
        raise ValueError("join of states with different widths")
    return FlagState(tuple(max(x, y) for x, y in zip(a.bits, b.bits)))


def build_lattice(catalog: FeatureCatalog) -> LatticeGraph:
    states = enumerate_valid_states(catalog)
    return LatticeGraph(states=states, edges=build_upgrade_edges(states))


def _rule_violated(
    rule: InvariantRule, state: FlagState, user: UserContext, catalog: FeatureCatalog
) -> bool:
    if not state.has(catalog, rule.guard_feature):
        return False
    if rule.predicate is Predicate.KYC_REQUIRED:
        return not user.kyc_verified
    if rule.predicate is Predicate.RISK_BELOW:
        # Boundary users fail: the comparison is strict.
        return user.risk_score >= rule.threshold
    enabled = set(state.enabled(catalog))
    for feat in rule.required:
        catalog.index(feat)  # unknown feature is a config error, not False
    return not rule.required <= enabled


def evaluate_user(
    state: FlagState,
    user: UserContext,
    rules: Sequence[InvariantRule],
    catalog: FeatureCatalog,
) -> Decision:
    """Check one user against one state.

    Collects every failing rule id rather than stopping at the first.
    Prerequisite-closure failures are reported as ``prereq:<feature>``
    pseudo-ids and force ``allow=False`` regardless of the rule set.
    """
    violations: list[str] = []
    value = state.as_int()
    masks = catalog.prereq_masks()
    if len(state.bits) != catalog.width:
        raise ValueError("state width does not match catalog")
    for i, mask in enumerate(masks):
        if (value >> i) & 1 and (value & mask) != mask:
            violations.append(f"prereq:{catalog.features[i]}")
    for rule in rules:
        catalog.index(rule.guard_feature)
        if _rule_violated(rule, state, user, catalog):
            violations.append(rule.rule_id)
    return Decision(allow=not violations, violations=tuple(violations))


def satisfaction_score(
    users: Sequence[UserContext],
    assignment: Mapping[str, FlagState],
    rules: Sequence[InvariantRule],
    catalog: FeatureCatalog,
) -> float:
    """Fraction of users whose assigned state passes every applicable rule.

    Users absent from the assignment hold the all-zero state, which is
    trivially compliant. An empty user list scores 1.0.
    """
    if not users:
        return 1.0
    zero = FlagState.zero(catalog.width)
    violators = 0
    for user in users:
        state = assignment.get(user.user_id, zero)
        if not evaluate_user(state, user, rules, catalog).allow:
            violators += 1
    return 1.0 - violators / len(users)


def to_dot(graph: LatticeGraph, catalog: FeatureCatalog) -> str:
    """Render the lattice as DOT text, deterministically ordered."""
    lines = ["digraph flag_lattice {", "  rankdir=BT;"]
    for state in graph.states:
        names = ",".join(state.enabled(catalog)) or "(none)"
        lines.append(f'  "{state.bitstring()}" [label="{state.bitstring()}\\n{names}"];')
    for lo, hi in graph.edges:
        lines.append(f'  "{lo.bitstring()}" -> "{hi.bitstring()}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
