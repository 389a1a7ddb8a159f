"""Acceptance gate: one test per release criterion.

Each test prints a single PASS line when it completes; under
``pytest -v`` the test names double as the per-criterion report. The
20-seed simulation suite is shared across the three simulation
criteria through a module-scoped fixture, so the whole gate runs in
about a minute.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from flaggov import audit, cli, envelope, lattice
from flaggov import simulator as sim
from flaggov.causal import OutcomeSample, bh_adjust, cuped_estimate, cuped_theta
from flaggov.counterfactual import RiskLedger, ledger_guard, ledger_step

N_SEEDS = 20


@pytest.fixture(scope="module")
def seed_suite():
    """run_ablation over twenty seeds of the default scenario."""
    start = time.perf_counter()
    runs = {}
    for seed in range(N_SEEDS):
        scenario = sim.Scenario(seed=seed)
        runs[seed] = (scenario, sim.run_ablation(scenario))
    elapsed = time.perf_counter() - start
    return runs, elapsed


def test_criterion_01_risk_budget_table():
    start = time.perf_counter()
    cases = ((10_000.0, 0.025), (25_000.0, 0.0625), (50_000.0, 0.125))
    for budget, expected in cases:
        got = envelope.exposure_cap_from_budget(5e6, 0.08, budget)
        assert abs(got - expected) <= 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    print(f"PASS criterion 01: budget table caps 0.025/0.0625/0.125 within 1e-12 ({elapsed:.3f}s)")


def test_criterion_02_expected_fraud_sessions():
    got = envelope.expected_fraud_sessions(5e6, 0.025, 0.08)
    assert abs(got - 10_000.0) <= 1e-9
    print("PASS criterion 02: expected fraud sessions 5e6 x 0.025 x 0.08 = 10000 within 1e-9")


def test_criterion_03_lattice_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(1234)
    for case in range(200):
        n = int(rng.integers(1, 11))
        feats = tuple(f"f{i}" for i in range(n))
        prereqs = {}
        for i in range(n):
            pool = list(range(i))
            if pool and rng.random() < 0.6:
                k = int(rng.integers(1, len(pool) + 1))
                chosen = rng.choice(pool, size=k, replace=False)
                prereqs[feats[i]] = frozenset(feats[j] for j in chosen)
        catalog = lattice.FeatureCatalog(feats, prereqs)

        # independent brute force: a code is valid when every enabled
        # feature has all its direct prerequisites enabled
        codes = np.arange(2**n, dtype=np.int64)
        ok = np.ones(codes.size, dtype=bool)
        for i, feat in enumerate(feats):
            mask = 0
            for req in prereqs.get(feat, ()):
                mask |= 1 << feats.index(req)
            has = ((codes >> i) & 1) == 1
            ok &= ~has | ((codes & mask) == mask)
        expected = set(codes[ok].tolist())

        states = lattice.enumerate_valid_states(catalog)
        assert {s.as_int() for s in states} == expected, f"catalog {case}"

        # meet/join closure over every valid pair, via the bitwise
        # forms the operators reduce to on this lattice
        valid = np.array(sorted(expected), dtype=np.int64)
        meets = valid[:, None] & valid[None, :]
        joins = valid[:, None] | valid[None, :]
        assert np.isin(meets, valid).all(), f"catalog {case}: meet left the lattice"
        assert np.isin(joins, valid).all(), f"catalog {case}: join left the lattice"
        # and the operators really are those bitwise forms
        if len(states) > 1:
            pairs = rng.integers(0, len(states), size=(30, 2))
            for ia, ib in pairs:
                a, b = states[ia], states[ib]
                assert lattice.meet(a, b).as_int() == a.as_int() & b.as_int()
                assert lattice.join(a, b).as_int() == a.as_int() | b.as_int()
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    print(f"PASS criterion 03: 200 random catalogs match brute force, closed under meet/join ({elapsed:.2f}s)")


def test_criterion_04_envelope_analytics():
    params = envelope.ControllerParams()
    # clean signals with the budget at or above target give e_max exactly
    for budget in (params.budget_target, 2.0, 10.0):
        assert envelope.envelope_cap(params, 0.0, budget) == params.e_max

    abuses = np.linspace(0.0, 0.5, 100)
    budgets = np.linspace(0.0, 3.0, 100)
    grid = np.array([[envelope.envelope_cap(params, a, b) for b in budgets] for a in abuses])
    assert (np.diff(grid, axis=0) <= 1e-15).all(), "cap rose with abuse"
    assert (np.diff(grid, axis=1) >= -1e-15).all(), "cap fell with budget"

    # branch priority truth table: invariant floor beats everything,
    # then up only when envelope and uplift both pass
    p = envelope.ControllerParams(step=0.02, min_exposure=0.01, e_max=0.5)
    for below_floor in (False, True):
        for env_ok in (False, True):
            for up_ok in (False, True):
                seg = envelope.SegmentState("all", 0.2)
                sig = envelope.SafetySignals(
                    abuse_rate=0.0,
                    budget=1.0,
                    compliance_readiness=1.0,
                    invariant_score=0.9 if below_floor else 1.0,
                    safety_penalty=0.0,
                )
                out = envelope.schedule_update(seg, sig, env_ok, up_ok, p)
                if below_floor:
                    assert out.exposure == pytest.approx(0.1), (below_floor, env_ok, up_ok)
                elif env_ok and up_ok:
                    assert out.exposure == pytest.approx(0.22), (below_floor, env_ok, up_ok)
                else:
                    assert out.exposure == pytest.approx(0.18), (below_floor, env_ok, up_ok)
    print("PASS criterion 04: envelope cap exact at e_max, monotone on 100x100 grid, 8-way branch table")


def test_criterion_05_ledger_guard_and_replenishment():
    rng = np.random.default_rng(55)
    # guard halves exposure, floored, whenever the balance is negative
    for _ in range(300):
        exposure = float(rng.uniform(0.0, 1.0))
        floor = float(rng.uniform(0.0, 0.3))
        ledger = RiskLedger(balance=float(-rng.uniform(1e-6, 1.0)))
        assert ledger_guard(ledger, exposure, floor) == max(floor, exposure * 0.5)
        healthy = RiskLedger(balance=float(rng.uniform(0.0, 1.0)))
        assert ledger_guard(healthy, exposure, floor) == exposure

    # with zero spend the balance reaches its cap in exactly
    # ceil((cap - L0) / rho) steps
    for _ in range(200):
        cap = float(rng.uniform(0.5, 2.0))
        initial = float(rng.uniform(0.0, cap - 1e-9))
        rho = float(rng.uniform(0.01, 0.5))
        ledger = RiskLedger(
            balance=initial, replenish_rate=rho, lambda_comp=1.0, balance_cap=cap
        )
        expected_steps = math.ceil((cap - initial) / rho)
        steps = 0
        while ledger.balance < cap:
            ledger = ledger_step(ledger, 0.0, 0.0, 0.0)
            steps += 1
            assert steps <= expected_steps, "cap not reached in the predicted step count"
        assert steps == expected_steps
    print("PASS criterion 05: ledger guard halves when in debt; zero-spend refill hits cap in ceil((cap-L0)/rho) steps")


def test_criterion_06_cuped_variance_reduction():
    start = time.perf_counter()
    rng = np.random.default_rng(60)
    rho, n, reps, lift = 0.7, 10_000, 1000, 0.05
    plain_taus, cuped_taus = [], []
    for _ in range(reps):
        xt = rng.normal(size=n)
        yt = rho * xt + math.sqrt(1 - rho**2) * rng.normal(size=n) + lift
        xc = rng.normal(size=n)
        yc = rho * xc + math.sqrt(1 - rho**2) * rng.normal(size=n)
        treat = [OutcomeSample(y=float(y), x=float(x)) for x, y in zip(xt, yt)]
        control = [OutcomeSample(y=float(y), x=float(x)) for x, y in zip(xc, yc)]
        theta = cuped_theta(treat + control)
        plain_taus.append(cuped_estimate(treat, control, 0.0).tau)
        cuped_taus.append(cuped_estimate(treat, control, theta).tau)
    ratio = np.var(cuped_taus, ddof=1) / np.var(plain_taus, ddof=1)
    assert 0.40 <= ratio <= 0.62, f"variance ratio {ratio:.4f} outside [0.40, 0.62]"
    mc_se = np.std(cuped_taus, ddof=1) / math.sqrt(reps)
    bias = abs(float(np.mean(cuped_taus)) - lift)
    assert bias <= 3 * mc_se, f"bias {bias:.2e} exceeds 3 MC SEs ({3 * mc_se:.2e})"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    print(f"PASS criterion 06: CUPED variance ratio {ratio:.3f} in [0.40, 0.62], unbiased ({elapsed:.1f}s)")


def _bh_brute_force(ps, q):
    m = len(ps)
    best = 0.0
    passed = False
    ordered = sorted(ps)
    for k in range(1, m + 1):
        if ordered[k - 1] <= k * q / m:
            best = ordered[k - 1]
            passed = True
    if not passed:
        return set()
    return {i for i, p in enumerate(ps) if p <= best}


def test_criterion_07_bh_oracle():
    rng = np.random.default_rng(70)
    for _ in range(1000):
        m = int(rng.integers(1, 13))
        ps = list(rng.uniform(0, 1, size=m).round(4))
        q = float(rng.uniform(0.01, 0.3))
        assert bh_adjust(ps, q) == _bh_brute_force(ps, q)
    for _ in range(100):
        ps = list(rng.uniform(0, 1, size=10))
        prev: set[int] = set()
        for q in (0.01, 0.03, 0.05, 0.1, 0.2, 0.3):
            cur = bh_adjust(ps, q)
            assert prev <= cur, "rejections shrank as q grew"
            prev = cur
    print("PASS criterion 07: BH matches brute-force threshold search on 1000 lists, monotone in q")


def test_criterion_08_simulation_orderings(seed_suite):
    runs, elapsed = seed_suite
    worst = {"fraud": 0.0, "comp": 0.0, "conv": 1.0, "ret_gap": float("inf")}
    for seed, (_, reports) in runs.items():
        naive = reports[sim.PolicyVariant.NAIVE].aggregates
        full = reports[sim.PolicyVariant.FULL_GOVERNANCE].aggregates
        fraud_ratio = full.fraud_rate / naive.fraud_rate
        comp_ratio = full.compliance_fail_rate / naive.compliance_fail_rate
        conv_ratio = full.conversion / naive.conversion
        ret_gap = full.retention - naive.retention
        assert fraud_ratio <= 0.6, f"seed {seed}: fraud ratio {fraud_ratio:.3f}"
        assert comp_ratio <= 0.25, f"seed {seed}: compliance ratio {comp_ratio:.3f}"
        assert ret_gap > 0.0, f"seed {seed}: retention gap {ret_gap:.4f}"
        assert conv_ratio >= 0.85, f"seed {seed}: conversion ratio {conv_ratio:.3f}"
        worst["fraud"] = max(worst["fraud"], fraud_ratio)
        worst["comp"] = max(worst["comp"], comp_ratio)
        worst["conv"] = min(worst["conv"], conv_ratio)
        worst["ret_gap"] = min(worst["ret_gap"], ret_gap)
    assert elapsed < 300.0
    print(
        "PASS criterion 08: 20-seed suite, worst fraud "
        f"{worst['fraud']:.3f}<=0.6, compliance {worst['comp']:.3f}<=0.25, "
        f"conversion {worst['conv']:.3f}>=0.85, retention gap {worst['ret_gap']:+.4f}>0 "
        f"({elapsed:.1f}s)"
    )


def test_criterion_09_ablation_monotonicity(seed_suite):
    runs, _ = seed_suite
    order = list(sim.ABLATION_ORDER)
    for seed, (_, reports) in runs.items():
        fraud = [reports[p].aggregates.fraud_rate for p in order]
        for i, (a, b) in enumerate(zip(fraud, fraud[1:])):
            assert b <= a, f"seed {seed}: fraud rose {order[i].value} -> {order[i + 1].value}"
        assert (
            reports[sim.PolicyVariant.INVARIANTS_ONLY].aggregates.compliance_fail_rate
            < reports[sim.PolicyVariant.NAIVE].aggregates.compliance_fail_rate
        ), f"seed {seed}: invariants_only compliance not strictly below naive"
    print("PASS criterion 09: fraud non-increasing across all four policies on every seed")


def test_criterion_10_ramp_shape(seed_suite):
    runs, _ = seed_suite
    for seed, (scenario, reports) in runs.items():
        governed = reports[sim.PolicyVariant.FULL_GOVERNANCE]
        for m in governed.daily:
            assert m.exposure <= scenario.scripted_exposure(m.day) + 1e-12, (
                f"seed {seed} day {m.day}: governed above script"
            )
            if 8 <= m.day <= 12:
                assert m.exposure <= 0.10 + 1e-12, (
                    f"seed {seed} day {m.day}: above 0.10 in the low-readiness window"
                )
    print("PASS criterion 10: governed exposure under the script daily, <=0.10 through days 8-12, all seeds")


def test_criterion_11_determinism_and_replay(tmp_path):
    argv = ["simulate", "--out", str(tmp_path / "a"), "--policy", "full_governance", "--seed", "0"]
    assert cli.main(argv) == 0
    first = (tmp_path / "a" / "report.json").read_bytes()
    argv_b = ["simulate", "--out", str(tmp_path / "b"), "--policy", "full_governance", "--seed", "0"]
    assert cli.main(argv_b) == 0
    second = (tmp_path / "b" / "report.json").read_bytes()
    assert first == second, "same seed produced different report.json bytes"

    report = json.loads(first)
    summary = audit.replay(str(tmp_path / "a" / "audit.log"))
    assert summary.final_ledger_balance == report["final_ledger_balance"]
    print("PASS criterion 11: byte-identical report.json per seed; audit replay rebuilds the ledger balance exactly")


def test_criterion_12_phase_plan():
    plan = sim.default_phase_plan()

    benign = sim.run_phase_plan(sim.Scenario(seed=0), plan)
    assert benign.final_phase_index == 3
    assert plan.phases[benign.final_phase_index].exposure_cap == pytest.approx(0.10)

    spiked = sim.run_phase_plan(
        sim.Scenario(seed=0, fraud_spike=sim.FraudSpike(start_day=6, end_day=8, multiplier=6.0)),
        plan,
    )
    names = [p.name for p in plan.phases]
    rollbacks = [
        t
        for t in spiked.transitions
        if t.cause == "fraud exit criterion"
        and names.index(t.from_phase) == 2
        and names.index(t.to_phase) == 1
    ]
    assert rollbacks, "no recorded phase-2 -> phase-1 rollback with the fraud cause"
    print("PASS criterion 12: benign run reaches phase 3 at the 10% cap; spike rolls phase 2 back to phase 1 for fraud")
