"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary and they are also echoed to stdout (visible with ``-s``).
"""
import itertools
import json
import math
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import arm_dataset, finite, make_table, tables, unit_ids
from expcontrols.cli import main
from expcontrols.controls import ControlDeclaration, ControlKind, control_values, validate_control
from expcontrols.diagnostics import (
    DecisionRule,
    TestMethod,
    Verdict,
    abs_mean_null_tc,
    diagnose_confounding,
    diagnostic_power,
    evaluate_decision_rules,
    mean_null_tc,
    sign_flip_test,
    threshold_count,
)
from expcontrols.pretrial import (
    COMPLIER,
    NONCOMPLIER,
    NONRESPONDER,
    RESPONDER,
    PretrialProtocol,
    Purpose,
    decompose_effect,
    identify_compliers,
    identify_responders,
    optimal_timing,
    placebo_effect,
)
from expcontrols.runner import run_diagnose, run_power, run_pretrial, run_simulate
from expcontrols.scenario import parse_scenario, parse_scenario_text, serialize_scenario, shipped_scenario_path
from expcontrols.science import (
    ObservedDataset,
    OutcomeDef,
    OutcomeRole,
    TreatmentKind,
    Unit,
    average_effect,
    difference_in_means,
    observed_outcome,
)
from expcontrols.simulation import (
    AssignmentMechanism,
    Experiment,
    FactorEffect,
    NoiseModel,
    ResponseCurve,
    apply_factor_effects,
    enumerate_assignments,
    simulate_crossover,
    simulate_experiment,
    simulate_timecourse,
)

RESULTS: dict[int, tuple[str, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException:
        RESULTS[number] = ("FAIL", title)
        print(f"FAIL criterion {number}: {title}")
        raise
    RESULTS[number] = ("PASS", title)
    print(f"PASS criterion {number}: {title}")


def enumeration_dims(table, mech, active="w_at", control="w_ct", outcome="p"):
    out = []
    for a in enumerate_assignments(mech, table.units):
        obs = np.array([observed_outcome(table, a, u, outcome) for u in table.unit_ids])
        out.append(difference_in_means(ObservedDataset(a, table.unit_ids, {outcome: obs}), outcome, active, control))
    return np.array(out)


def stressed_units(n, stressed):
    return [Unit(u, {"room": "stress" if i in stressed else "calm"}) for i, u in enumerate(unit_ids(n))]


ROOMS = {"room": ["calm", "stress"]}


# 1 ------------------------------------------------------------------------------------


def test_c01_unbiased_over_all_assignments():
    with criterion(1, "difference in means is unbiased over every complete randomization"):
        rs = np.random.default_rng(20240601)
        for i in range(20):
            n = (4, 6, 8)[i % 3]
            t = make_table(rs.normal(scale=10, size=(n, 1, 3)))
            n_at = int(rs.integers(1, n - 1))
            n_ct = int(rs.integers(1, n - n_at))
            mech = AssignmentMechanism.complete({"w_at": n_at, "w_ct": n_ct, "w_nt": n - n_at - n_ct})
            dims = enumeration_dims(t, mech)
            assert dims.size == math.comb(n, n_at) * math.comb(n - n_at, n_ct)
            truth = float(np.mean(t.values[:, 0, 0] - t.values[:, 0, 1]))
            assert abs(dims.mean() - average_effect(t, "p", "w_at", "w_ct")) <= 1e-12
            assert abs(dims.mean() - truth) <= 1e-12


# 2 ------------------------------------------------------------------------------------


def _declaration(kind, eps, min_mag, null):
    kw = {"epsilon": eps, "null_value": null}
    if not kind.is_null:
        kw["min_magnitude"] = min_mag
    if kind.axis == "treatment":
        return ControlDeclaration(kind, "p", "w_nt", **kw)
    if kind.axis == "outcome":
        return ControlDeclaration(kind, "k", "w_at", **kw)
    return ControlDeclaration(kind, "k", contrast=("w_at", "w_ct"), **kw)


def _cell(decl):
    o = 0 if decl.outcome == "p" else 1
    if decl.kind.axis == "contrast":
        return o, 0, 1
    return o, {"w_at": 0, "w_ct": 1, "w_nt": 2}[decl.treatment], None


def _set_value(vals, unit, decl, v):
    o, j, base = _cell(decl)
    vals[unit, o, j] = v + (vals[unit, o, base] if base is not None else 0.0)


def test_c02_control_definitions():
    with criterion(2, "six control kinds hold on enforcing tables; one perturbation flips one unit"):
        rs = np.random.default_rng(7)
        for kind in ControlKind:
            for trial in range(10):
                n = int(rs.integers(1, 12))
                eps = float(rs.uniform(0, 1))
                min_mag = eps + float(rs.uniform(0.1, 2))
                null = 0.0 if kind.axis == "contrast" else float(rs.uniform(-3, 3))
                decl = _declaration(kind, eps, min_mag, null)
                vals = rs.normal(scale=5, size=(n, 2, 3))
                for u in range(n):
                    if kind.is_null:
                        v = null + rs.uniform(-eps, eps)
                    else:
                        v = null + rs.choice([-1, 1]) * (min_mag + rs.exponential())
                    _set_value(vals, u, decl, v)
                t = make_table(vals)
                assert validate_control(decl, t).holds_for_all
                victim = int(rs.integers(n))
                bad = vals.copy()
                off = null + (eps + 1.0 if kind.is_null else 0.5 * min_mag * rs.choice([0, 1]))
                _set_value(bad, victim, decl, off)
                rep = validate_control(decl, make_table(bad))
                flipped = [u for u, c in rep.per_unit.items() if not c.holds]
                assert flipped == [f"u{victim}"]
                assert not rep.holds_for_all


# 3 ------------------------------------------------------------------------------------


def test_c03_waiting_room_half_shifted():
    with criterion(3, "waiting-room shift on half the units: null arm mean 2, unbiased, variance inflated"):
        delta, n, reps = 4.0, 30, 10_000
        rs = np.random.default_rng(3)
        stressed = set(rs.permutation(n)[: n // 2].tolist())
        vals = np.zeros((n, 1, 3))
        vals[:, 0, 0] = 1.0
        t = make_table(vals, units=stressed_units(n, stressed), factor_levels=ROOMS)
        exp = Experiment(t, AssignmentMechanism.complete({"w_at": 10, "w_ct": 10, "w_nt": 10}),
                         [FactorEffect("room", "stress", "p", delta)], NoiseModel.gaussian({"p": 1.0}), ["p"])
        means = np.array([mean_null_tc(ds, "p", "w_nt") for ds in exp.replicate(range(reps))])
        se = means.std(ddof=1) / math.sqrt(reps)
        assert abs(means.mean() - delta / 2) < 4 * se

        mech = AssignmentMechanism.complete({"w_at": 4, "w_ct": 4})
        for _ in range(20):
            base = rs.uniform(0, 1, size=8)
            tau = float(rs.normal())
            v = np.zeros((8, 1, 2))
            v[:, 0, 0] = base + tau
            v[:, 0, 1] = base
            half = set(rs.permutation(8)[:4].tolist())
            clean = make_table(v, units=stressed_units(8, half), factor_levels=ROOMS)
            shifted = apply_factor_effects(clean, [FactorEffect("room", "stress", "p", delta)])
            d_clean, d_flaw = enumeration_dims(clean, mech), enumeration_dims(shifted, mech)
            assert abs(d_flaw.mean() - average_effect(clean, "p", "w_at", "w_ct")) <= 1e-12
            assert d_flaw.var() > d_clean.var()


# 4 ------------------------------------------------------------------------------------


def test_c04_confounding_exact():
    with criterion(4, "stress tied to the active arm: stage-2 arm difference and bias both equal the shift"):
        n = 16
        mech = AssignmentMechanism.confounded("room", {"stress": {"w_at": 1.0}, "calm": {"w_ct": 0.5, "w_nt": 0.5}})
        for delta in (4.0, 2.5, 0.75, 12.0):
            for tau in (0.0, 1.5):
                vals = np.zeros((n, 1, 3))
                vals[:, 0, 0] = tau
                t = make_table(vals, units=stressed_units(n, set(range(8))), factor_levels=ROOMS)
                for seed in range(3):
                    ds = simulate_experiment(t, mech, [FactorEffect("room", "stress", "p", delta)],
                                             NoiseModel.none(), ["p"], seed)
                    dim = difference_in_means(ds, "p", "w_at", "w_ct")
                    assert dim - average_effect(t, "p", "w_at", "w_ct") == delta
                    if tau == 0.0:
                        finding = diagnose_confounding(ds, "p", "w_nt", "w_at", "w_ct", 0.05)
                        assert finding.overall_mean_flagged
                        assert finding.arm_difference == delta


# 5 ------------------------------------------------------------------------------------


def test_c05_fixture_statistics_and_fraction_boundary():
    with criterion(5, "fixture statistics exact; fraction rule boundary at N/10"):
        fixture = [0.1, -0.1, 0.3]
        ds = arm_dataset(fixture)
        # exact rational mean of the stored floats, correctly rounded
        exact_mean = float(sum(map(Fraction, fixture)) / 3)
        exact_abs = float(sum(Fraction(abs(x)) for x in fixture) / 3)
        m, am = mean_null_tc(ds, "p", "w_nt"), abs_mean_null_tc(ds, "p", "w_nt")
        assert m == exact_mean and abs(m - 0.1) <= math.ulp(0.1)
        assert am == exact_abs == 0.5 / 3
        assert threshold_count(ds, "p", "w_nt", 0.2) == 1

        rule = DecisionRule.fraction_rule(0.2, 0.10, id="f")
        ten = arm_dataset([1.0] + [0.0] * 9)
        assert evaluate_decision_rules(ten, [rule], "p", "w_nt")["f"].verdict is Verdict.REJECT
        twenty = arm_dataset([1.0] + [0.0] * 19)
        assert evaluate_decision_rules(twenty, [rule], "p", "w_nt")["f"].verdict is Verdict.PASS
        twenty_two = arm_dataset([1.0, 1.0] + [0.0] * 18)
        assert evaluate_decision_rules(twenty_two, [rule], "p", "w_nt")["f"].verdict is Verdict.REJECT


# 6 ------------------------------------------------------------------------------------


def test_c06_calibration():
    with criterion(6, "mean test size 0.05 +/- 0.01 for both methods; sign-flip p on {1,1,1,1} is 0.125"):
        n_arm, reps = 10, 10_000
        vals = np.zeros((3 * n_arm, 1, 3))
        exp = Experiment(make_table(vals),
                         AssignmentMechanism.complete({"w_at": n_arm, "w_ct": n_arm, "w_nt": n_arm}),
                         [], NoiseModel.gaussian({"p": 1.0}), ["p"])
        for method in TestMethod:
            rate = diagnostic_power(exp, DecisionRule.mean_test(0.05, method), "w_nt", None, reps, seed=606)
            print(f"  size[{method.value}] = {rate:.4f}")
            assert 0.04 <= rate <= 0.06

        obs = np.ones(4)
        patterns = np.array(list(itertools.product([-1, 1], repeat=4)))
        oracle = np.mean(np.abs((patterns * obs).mean(axis=1)) >= abs(obs.mean()))
        p = sign_flip_test(obs).p_value
        assert oracle == 0.125
        assert p == oracle


# 7 ------------------------------------------------------------------------------------

OUTS = (
    OutcomeDef("bp", role=OutcomeRole.PRIMARY),
    OutcomeDef("reaction", role=OutcomeRole.SECONDARY),
    OutcomeDef("alert", role=OutcomeRole.SECONDARY),
    OutcomeDef("lytes", role=OutcomeRole.SECONDARY),
)


def mixed_table(seed, n=30):
    rs = np.random.default_rng(seed)
    resp = np.zeros(n, dtype=bool)
    resp[rs.permutation(n)[: int(rs.integers(5, 25))]] = True
    comp = np.zeros(n, dtype=bool)
    comp[rs.permutation(n)[: int(rs.integers(5, 25))]] = True
    units = [Unit(u, {}, bool(r), bool(c)) for u, r, c in zip(unit_ids(n), resp, comp)]
    vals = np.zeros((n, 4, 3))
    vals[:, 0, 0] = np.where(resp, rs.uniform(3, 8, n), 0.0)
    vals[:, 1, 0] = np.where(resp, -rs.uniform(10, 40, n), 0.0)
    vals[:, 2, 0] = np.where(resp, rs.uniform(1, 3, n), 0.0)
    vals[:, 3, 0] = rs.uniform(1, 2, n)
    return make_table(vals, units=units, outcomes=OUTS)


def test_c07_pretrial_recovery():
    with criterion(7, "pretrial protocols recover responders, compliers, peak time and placebo shift"):
        rt = ControlDeclaration(ControlKind.NON_NULL_CONTRAST, "reaction", contrast=("w_at", "w_ct"), id="rt")
        al = ControlDeclaration(ControlKind.NON_NULL_CONTRAST, "alert", contrast=("w_at", "w_ct"), id="al")
        ly = ControlDeclaration(ControlKind.NON_NULL_OUTCOME, "lytes", "w_at", id="ly")
        for seed in range(5):
            t = mixed_table(seed)
            crossover = simulate_crossover(t, [("reaction", "w_at", "w_ct"), ("alert", "w_at", "w_ct")], 1,
                                           NoiseModel.none(), seed)
            proto = PretrialProtocol("screen", Purpose.RESPONDERS, ("rt", "al"), decision_threshold=0.5)
            rep = identify_responders(crossover, [rt, al], proto)
            assert rep.per_unit_calls == {u.id: RESPONDER if u.responder_truth else NONRESPONDER for u in t.units}

            ds = simulate_experiment(t, AssignmentMechanism.complete({"w_at": len(t)}), [], NoiseModel.none(),
                                     ["lytes"], seed)
            crep = identify_compliers(ds, ly, PretrialProtocol("c", Purpose.COMPLIERS, ("ly",), decision_threshold=0.5))
            assert crep.per_unit_calls == {u.id: COMPLIER if u.complier_truth else NONCOMPLIER for u in t.units}

        step = 0.25
        for onset, rise, fall in [(1, 2, 3), (0, 1, 1), (4, 6, 2), (2, 1, 9)]:
            peak = (onset + rise) * step
            curve = ResponseCurve(onset * step, peak, peak + fall * step)
            times = np.arange(0, peak + fall * step + 1, step)
            t = mixed_table(onset)
            tc = simulate_timecourse(t, {u: curve for u in t.unit_ids}, "w_at", "bp", times, NoiseModel.none(), 0)
            assert optimal_timing(tc).time == peak

        n = 40
        units = [Unit(u, {"disclosure": "blinded" if i % 2 else "disclosed"}) for i, u in enumerate(unit_ids(n))]
        t = make_table(np.zeros((n, 1, 3)), units=units)
        mech = AssignmentMechanism.confounded("disclosure", {"blinded": {"w_ct": 1.0}, "disclosed": {"w_nt": 1.0}})
        for shift in (-2.0, 0.5, 3.25):
            eff = [FactorEffect("disclosure", "blinded", "p", shift)]
            exact = Experiment(t, mech, eff, NoiseModel.none(), ["p"]).simulate(1)
            assert placebo_effect(exact, "p", "w_ct", "w_nt") == shift
        shift, reps = -2.0, 10_000
        noisy = Experiment(t, mech, [FactorEffect("disclosure", "blinded", "p", shift)],
                           NoiseModel.gaussian({"p": 1.0}), ["p"])
        est = np.array([placebo_effect(ds, "p", "w_ct", "w_nt") for ds in noisy.replicate(range(reps))])
        assert abs(est.mean() - shift) < 4 * est.std(ddof=1) / math.sqrt(reps)


# 8 ------------------------------------------------------------------------------------


def _recombine(rep):
    f = rep.responder_fraction
    r = f * rep.responder_effect if rep.responder_effect is not None else 0.0
    nr = (1 - f) * rep.nonresponder_effect if rep.nonresponder_effect is not None else 0.0
    return r + nr


@settings(max_examples=300, deadline=None)
@given(tables(min_units=1, max_units=30, n_treatments=2), st.data())
def test_c08_decomposition_identity(table, data):
    with criterion(8, "responder decomposition recombines to the average effect"):
        calls = {u: data.draw(st.booleans()) for u in table.unit_ids}
        for outcome in (o.id for o in table.outcomes):
            rep = decompose_effect(table, calls, outcome, "w_at", "w_ct")
            assert abs(_recombine(rep) - average_effect(table, outcome, "w_at", "w_ct")) <= 1e-12


def test_c08_decomposition_identity_on_shipped_table():
    s = parse_scenario(shipped_scenario_path("caffeine"))
    t = s.build_table()
    for truth in (True, False):
        calls = {u.id: u.responder_truth == truth for u in t.units}
        for o in (o.id for o in t.outcomes):
            rep = decompose_effect(t, calls, o, "w_at", "w_ct3")
            assert abs(_recombine(rep) - average_effect(t, o, "w_at", "w_ct3")) <= 1e-12


# 9 ------------------------------------------------------------------------------------


def test_c09_determinism_and_round_trip(tmp_path):
    with criterion(9, "byte-identical reports for a fixed seed; caffeine scenario round-trips"):
        path = shipped_scenario_path("caffeine")
        s = parse_scenario(path)
        for run in (lambda sc: run_simulate(sc, seed=17, replications=20),
                    lambda sc: run_diagnose(sc, seed=17),
                    lambda sc: run_pretrial(sc, "responder_screen", seed=17)):
            a, b = run(s), run(parse_scenario(path))
            assert a.canonical() == b.canonical() and a.digest == b.digest
        outs = [tmp_path / "a.json", tmp_path / "b.json"]
        for out in outs:
            assert main(["simulate", str(path), "--seed", "17", "--format", "machine", "--output", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert json.loads(outs[0].read_text())["report"]["seed"] == 17

        again = parse_scenario_text(serialize_scenario(s))
        assert again == s and serialize_scenario(again) == serialize_scenario(s)
        assert {c.kind for c in s.controls} == set(ControlKind)
        roles = {t.id: t.kind for t in s.treatments}
        assert roles["w_null"] is TreatmentKind.NULL_TREATMENT_CONTROL
        assert [tid for tid, k in roles.items() if k is TreatmentKind.CONTROL_TREATMENT] == ["w_ct1", "w_ct2", "w_ct3"]


# 10 -----------------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_power_monotone():
    with criterion(10, "power is non-decreasing in shift and in arm size on a 4x4 grid"):
        s = parse_scenario(shipped_scenario_path("power_demo"))
        rep = run_power(s, replications=10_000)
        grid = rep.body["power"]["grid"]
        sizes = sorted({r["arm_size"] for r in grid})
        mags = sorted({r["magnitude"] for r in grid})
        assert len(sizes) == 4 and len(mags) == 4
        power = {(r["arm_size"], r["magnitude"]): r["power"] for r in grid}
        for n in sizes:
            print("  n=%-3d " % n + " ".join(f"{power[n, m]:.4f}" for m in mags))
        for n in sizes:
            row = [power[n, m] for m in mags]
            assert all(x <= y for x, y in zip(row, row[1:]))
        for m in mags:
            col = [power[n, m] for n in sizes]
            assert all(x <= y for x, y in zip(col, col[1:]))
