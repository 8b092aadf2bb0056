"""Scenario runs and their deterministic reports.

Each ``run_*`` function returns a :class:`RunReport` whose body depends only on
the scenario, the seed and the tool version. No timestamps or host details
are recorded, so equal inputs give byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .controls import classify_ncx, validate_control
from .diagnostics import (
    DecisionRule,
    TestMethod,
    Verdict,
    adjust_multiplicity,
    diagnose,
    diagnostic_power,
    evaluate_decision_rules,
    monte_carlo_se,
    replication_seeds,
    test_mean_zero,
)
from .errors import DomainError, ProtocolViolationError, UnregisteredProtocolError
from .pretrial import (
    ExclusionList,
    Purpose,
    SubgroupReport,
    decompose_effect,
    default_threshold,
    exclusion_list,
    identify_compliers,
    identify_responders,
    optimal_timing,
    placebo_effect,
)
from .scenario import Scenario
from .science import ScienceTable, average_effect, difference_in_means
from .simulation import AssignmentMechanism, Experiment, NoiseModel, ResponseCurve, simulate_crossover, simulate_timecourse

EXIT_PASS, EXIT_ERROR, EXIT_REJECT = 0, 1, 2
TOOL = "expcontrols"


@dataclass(frozen=True)
class RunReport:
    command: str
    body: dict
    exit_status: int = EXIT_PASS
    exclusions: ExclusionList | None = None

    def canonical(self) -> str:
        return json.dumps(self.body, sort_keys=True, separators=(",", ":"), allow_nan=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_json(self) -> str:
        doc = {"report": self.body, "report_sha256": self.digest}
        return json.dumps(doc, indent=2, allow_nan=False) + "\n"

    def summary(self) -> str:
        return "\n".join(_summary_lines(self)) + "\n"


def _header(scenario: Scenario, command: str, seed: int) -> dict:
    return {
        "tool": {"name": TOOL, "version": __version__},
        "command": command,
        "scenario": {"name": scenario.name, "digest": scenario.digest},
        "seed": seed,
    }


def experiment_for(scenario: Scenario, table: ScienceTable | None = None, **changes) -> Experiment:
    exp = Experiment(
        table if table is not None else scenario.build_table(),
        scenario.mechanism,
        tuple(scenario.effects),
        scenario.noise,
        tuple(scenario.measured_outcomes),
        scenario.name,
    )
    return exp.with_(**changes) if changes else exp


def _arm_means(dataset, outcomes) -> dict:
    out = {}
    for arm, n in sorted(dataset.assignment.arm_sizes().items()):
        if n:
            out[arm] = {o: float(dataset.arm_values(o, arm).mean()) for o in outcomes}
    return out


# -- simulate / diagnose ------------------------------------------------------------------------------


def run_simulate(
    scenario: Scenario,
    seed: int | None = None,
    replications: int = 1,
    command: str = "simulate",
) -> RunReport:
    """Simulate the main study once and apply every decision rule.

    With ``replications > 1`` the report also carries per-rule rejection rates
    over that many independent replications; the verdict still comes from the
    run at ``seed``.
    """
    seed = scenario.seed if seed is None else seed
    if replications < 1:
        raise DomainError("replications must be >= 1")
    exp = experiment_for(scenario)
    table = exp.table
    primary, active, control = scenario.primary_outcome, scenario.active, scenario.primary_control
    body = _header(scenario, command, seed)
    controls = []
    for decl in scenario.controls:
        rep = validate_control(decl, table).to_dict()
        rep["ncx_label"] = classify_ncx(decl, primary, active, control).value
        controls.append(rep)
    body["ground_truth"] = {
        "n_units": len(table),
        "estimand": {
            "outcome": primary, "active": active, "control": control,
            "average_effect": average_effect(table, primary, active, control),
        },
        "controls": controls,
    }

    ds = exp.simulate(seed)
    arms = ds.assignment.arm_sizes()
    observed = {
        "arm_sizes": dict(sorted(arms.items())),
        "arm_means": _arm_means(ds, exp.measured_outcomes),
        "difference_in_means": None,
    }
    if arms.get(active) and arms.get(control):
        observed["difference_in_means"] = difference_in_means(ds, primary, active, control)
    body["observed"] = observed

    null_tc = scenario.null_tc
    report = None
    if null_tc is not None and arms.get(null_tc):
        method = TestMethod(scenario.diagnostics["method"])
        conf = None
        if arms.get(active) and arms.get(control):
            conf = (active, control, scenario.diagnostics["confounding_alpha"])
        report = diagnose(ds, primary, null_tc, scenario.rules, method, (), conf, scenario.multiplicity)
        body["diagnostics"] = {"null_tc": null_tc, **report.to_dict()}
        if command == "diagnose":
            body["diagnostics"]["all_tests"] = _all_tests(ds, primary, null_tc, scenario.multiplicity)
    else:
        body["diagnostics"] = {"null_tc": null_tc, "skipped": "no units in a null treatment-control arm"}

    if replications > 1:
        body["replications"] = _replicate(exp, scenario, seed, replications)

    rejected = [] if report is None else sorted(k for k, v in report.verdicts.items() if v.verdict is Verdict.REJECT)
    status = EXIT_REJECT if rejected else EXIT_PASS
    body["verdict"] = {
        "status": Verdict.REJECT.value if rejected else Verdict.PASS.value,
        "rejected_rules": rejected,
        "exit_status": status,
    }
    return RunReport(command, body, status)


def run_diagnose(scenario: Scenario, seed: int | None = None, replications: int = 1) -> RunReport:
    """Like :func:`run_simulate` but reports both mean-zero tests side by side."""
    return run_simulate(scenario, seed, replications, command="diagnose")


def _all_tests(ds, primary: str, null_tc: str, multiplicity: str) -> dict:
    results = {m.value: test_mean_zero(ds, primary, null_tc, m) for m in TestMethod}
    adj = adjust_multiplicity([r.p_value for r in results.values()], multiplicity)
    return {k: {**r.to_dict(), "adjusted_p": p} for (k, r), p in zip(results.items(), adj)}


def _replicate(exp: Experiment, scenario: Scenario, seed: int, replications: int, batch: int = 2000) -> dict:
    rules, null_tc = scenario.rules, scenario.null_tc
    primary, active, control = scenario.primary_outcome, scenario.active, scenario.primary_control
    hits = {r.id: 0 for r in rules}
    dims = []
    seeds = replication_seeds(seed, replications)
    for start in range(0, replications, batch):
        for ds in exp.replicate(seeds[start:start + batch]):
            arms = ds.assignment.arm_sizes()
            if null_tc is not None and arms.get(null_tc) and rules:
                for rid, out in evaluate_decision_rules(ds, rules, primary, null_tc, scenario.multiplicity).items():
                    hits[rid] += out.verdict is Verdict.REJECT
            if arms.get(active) and arms.get(control):
                dims.append(difference_in_means(ds, primary, active, control))
    rates = {}
    for rid, h in hits.items():
        p = h / replications
        rates[rid] = {"rejection_rate": p, "mc_se": monte_carlo_se(p, replications)}
    return {
        "count": replications,
        "rules": rates,
        "mean_difference_in_means": float(np.mean(dims)) if dims else None,
    }


# -- pretrial -------------------------------------------------------------------------------------


def run_pretrial(
    scenario: Scenario,
    protocol_id: str,
    seed: int | None = None,
    want_exclusions: bool = False,
) -> RunReport:
    """Run one pre-trial protocol on the full candidate pool.

    Asking for an exclusion list from an unregistered protocol is refused
    before any simulation happens.
    """
    seed = scenario.seed if seed is None else seed
    protocol = scenario.protocol(protocol_id)
    if want_exclusions and not protocol.registered:
        raise UnregisteredProtocolError(
            f"protocol {protocol.id!r} is not registered; refusing to produce an exclusion list"
        )
    if want_exclusions and protocol.purpose not in (Purpose.RESPONDERS, Purpose.COMPLIERS):
        raise ProtocolViolationError(f"{protocol.purpose.value} protocols do not produce exclusions")
    table = scenario.build_table(apply_exclusions=False)
    body = _header(scenario, "pretrial", seed)
    body["protocol"] = {
        "id": protocol.id,
        "purpose": protocol.purpose.value,
        "registered": protocol.registered,
        "digest": protocol.digest(),
    }
    notes: list[str] = []
    if not protocol.registered:
        notes.append("protocol is not registered; its results cannot be used to exclude units")
    handler = {
        Purpose.TIMING: _timing,
        Purpose.RESPONDERS: _responders,
        Purpose.COMPLIERS: _compliers,
        Purpose.PLACEBO: _placebo,
    }[protocol.purpose]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result, subgroup = handler(scenario, protocol, table, seed)
    notes.extend(str(w.message) for w in caught)
    body["result"] = result
    excl = None
    if want_exclusions:
        excl = exclusion_list(protocol, subgroup)
        body["exclusions"] = excl.to_dict()
    body["notes"] = notes
    return RunReport("pretrial", body, EXIT_PASS, excl)


def _timing(scenario: Scenario, protocol, table: ScienceTable, seed: int):
    opts = protocol.options
    decl = scenario.control(protocol.controls[0])
    treatment = opts.get("treatment") or decl.treatment or decl.contrast[0]
    outcome = opts.get("outcome", decl.outcome)
    times = opts["times"]
    c = opts.get("curve") or {"onset": 0.0, "peak_time": times[len(times) // 2], "decay_time": times[-1]}
    curve = ResponseCurve(c["onset"], c["peak_time"], c["decay_time"])
    tc = simulate_timecourse(table, {u: curve for u in table.unit_ids}, treatment, outcome,
                             times, scenario.noise, seed)
    res = optimal_timing(tc, opts.get("criterion", "peak_of_mean"), opts.get("fraction", 0.5))
    return {**res.to_dict(), "treatment": treatment, "outcome": outcome, "true_peak_time": curve.peak_time}, None


def _truth_agreement(calls: dict, truth: dict, positive: str) -> dict:
    known = {u: t for u, t in truth.items() if t is not None and calls.get(u) in (positive, "non" + positive)}
    if not known:
        return {"units_with_truth": 0, "agreement": None, "misclassified": []}
    wrong = sorted(u for u, t in known.items() if (calls[u] == positive) != t)
    return {"units_with_truth": len(known), "agreement": 1 - len(wrong) / len(known), "misclassified": wrong}


def _subgroup_dict(rep: SubgroupReport) -> dict:
    return {k: v for k, v in rep.to_dict().items() if k != "per_unit_calls"}


def _responders(scenario: Scenario, protocol, table: ScienceTable, seed: int):
    decls = [scenario.control(c) for c in protocol.controls]
    reps = protocol.per_unit_replicates
    contrasts = [(d.outcome, *d.contrast) for d in decls] if all(d.contrast for d in decls) else None
    if contrasts is None:
        raise ProtocolViolationError("responder screens use non-null contrast controls")
    data = simulate_crossover(table, contrasts, reps, scenario.noise, seed)
    thresholds = None
    if protocol.mode == "threshold" and protocol.decision_threshold is None:
        thresholds = [default_threshold(scenario.noise.sd(d.outcome), reps) for d in decls]
    rep = identify_responders(data, decls, protocol, thresholds)
    truth = {u.id: u.responder_truth for u in table.units}
    primary, active, control = scenario.primary_outcome, scenario.active, scenario.primary_control
    result = {
        "thresholds": thresholds if thresholds is not None else protocol.decision_threshold,
        "screen": _subgroup_dict(rep),
        "per_unit_calls": rep.per_unit_calls,
        "truth_check": _truth_agreement(rep.per_unit_calls, truth, "responder"),
        "primary_effect_by_call": _subgroup_dict(decompose_effect(table, rep.per_unit_calls, primary, active, control)),
    }
    return result, rep


def _compliers(scenario: Scenario, protocol, table: ScienceTable, seed: int):
    decl = scenario.control(protocol.controls[0])
    exp = Experiment(
        table, AssignmentMechanism.complete({decl.treatment: len(table)}), tuple(scenario.effects),
        scenario.noise, (decl.outcome,), scenario.name,
    )
    ds = exp.simulate(seed)
    threshold = protocol.decision_threshold
    if threshold is None:
        threshold = 3.0 * scenario.noise.sd(decl.outcome)
        protocol = replace(protocol, decision_threshold=threshold)
    rep = identify_compliers(ds, decl, protocol, decl.resolved_null_value(table))
    truth = {u.id: u.complier_truth for u in table.units}
    result = {
        "threshold": threshold,
        "screen": _subgroup_dict(rep),
        "per_unit_calls": rep.per_unit_calls,
        "truth_check": _truth_agreement(rep.per_unit_calls, truth, "complier"),
    }
    return result, rep


def _placebo(scenario: Scenario, protocol, table: ScienceTable, seed: int):
    opts = protocol.options
    blinded, unblinded = opts["blinded"], opts["unblinded"]
    factor, level = opts["disclosure_factor"], opts["blinded_level"]
    if factor not in table.factor_levels:
        raise ProtocolViolationError(f"unknown disclosure factor {factor!r}")
    rows = {lv: {blinded if lv == level else unblinded: 1.0} for lv in table.factor_levels[factor]}
    outcome = opts.get("outcome", scenario.primary_outcome)
    exp = Experiment(table, AssignmentMechanism.confounded(factor, rows), tuple(scenario.effects),
                     scenario.noise, (outcome,), scenario.name)
    est = placebo_effect(exp.simulate(seed), outcome, blinded, unblinded)
    truth = placebo_effect(exp.with_(noise=NoiseModel.none()).simulate(seed), outcome, blinded, unblinded)
    return {"outcome": outcome, "blinded": blinded, "unblinded": unblinded,
            "placebo_effect": est, "true_placebo_effect": truth}, None


# -- power ------------------------------------------------------------------------------------------


def run_power(
    scenario: Scenario,
    seed: int | None = None,
    replications: int | None = None,
    arm_sizes: list[int] | None = None,
    magnitudes: list[float] | None = None,
    rule_id: str | None = None,
) -> RunReport:
    """Rejection rate of one rule over a grid of arm sizes and flaw magnitudes.

    Every cell reuses the same replication seeds, so differences between cells
    are not blurred by fresh simulation noise.
    """
    seed = scenario.seed if seed is None else seed
    cfg = scenario.power or {}
    rule_id = rule_id or cfg.get("rule")
    if rule_id is None or not cfg.get("flaw"):
        raise DomainError("scenario has no power section")
    rule: DecisionRule = scenario.rule(rule_id)
    replications = replications or cfg.get("replications", 1000)
    arm_sizes = arm_sizes or cfg.get("arm_sizes") or [None]
    magnitudes = magnitudes if magnitudes is not None else cfg.get("magnitudes")
    flaw_cfg = cfg["flaw"]
    if scenario.null_tc is None:
        raise DomainError("power analysis needs a null treatment-control level")
    rows = []
    for n in arm_sizes:
        if n is None:
            mech, table = scenario.mechanism, scenario.build_table()
        else:
            mech = scenario.mechanism.resized(n)
            table = scenario.build_table(n_units=n * len(mech.arms), apply_exclusions=False)
        if "effect" in flaw_cfg:
            base = scenario.effect(flaw_cfg["effect"])
            others = tuple(e for e in scenario.effects if e.id != base.id)
            exp = experiment_for(scenario, table, mechanism=mech, effects=others)
            flaws = [replace(base, shift=m) for m in magnitudes]
        else:
            exp = experiment_for(scenario, table, mechanism=mech)
            flaws = [scenario.noise.with_sigma(flaw_cfg["noise"], m) for m in magnitudes]
        for m, flaw in zip(magnitudes, flaws):
            p = diagnostic_power(exp, rule, scenario.null_tc, flaw, replications, seed, scenario.primary_outcome)
            rows.append({
                "arm_size": n if n is not None else scenario.mechanism.arm_sizes.get(scenario.null_tc),
                "magnitude": m,
                "power": p,
                "mc_se": monte_carlo_se(p, replications),
            })
    body = _header(scenario, "power", seed)
    body["power"] = {
        "rule": rule_id,
        "rule_kind": rule.kind.value,
        "flaw": dict(flaw_cfg),
        "replications": replications,
        "grid": rows,
    }
    return RunReport("power", body, EXIT_PASS)


# -- summaries --------------------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


def _summary_lines(report: RunReport) -> list[str]:
    b = report.body
    lines = [f"{TOOL} {b['tool']['version']} {b['command']}: scenario {b['scenario']['name']} (seed {b['seed']})"]
    if b["command"] in ("simulate", "diagnose"):
        est = b["ground_truth"]["estimand"]
        lines.append(
            f"true average effect of {est['active']} vs {est['control']} on {est['outcome']}: "
            f"{_fmt(est['average_effect'])}; observed difference in means: {_fmt(b['observed']['difference_in_means'])}"
        )
        for c in b["ground_truth"]["controls"]:
            lines.append(f"  control {c['declaration']} ({c['kind']}): holds for {c['fraction_holding']:.0%} of units")
        d = b["diagnostics"]
        if "skipped" in d:
            lines.append(f"diagnostics skipped: {d['skipped']}")
        else:
            lines.append(
                f"null control {d['null_tc']} (n={d['arm_size']}): mean {_fmt(d['stat_mean'])}, "
                f"|mean| {_fmt(d['stat_abs_mean'])}, test p {_fmt(d['test']['p_value'])}"
            )
            for rid, v in d["verdicts"].items():
                if "p_value" in v:
                    detail = f"p {_fmt(v['p_value'])} vs alpha {_fmt(v['limit'])}"
                else:
                    detail = f"N_A {v['statistic']}, rejects at {v['limit']}"
                lines.append(f"  rule {rid}: {v['verdict']} ({detail})")
            if d["confounding"]:
                c = d["confounding"]
                lines.append(
                    f"  confounding check: overall mean flagged={c['overall_mean_flagged']}, "
                    f"arm difference {_fmt(c['arm_difference'])} (p {_fmt(c['arm_difference_p'])})"
                )
        if "replications" in b:
            for rid, r in b["replications"]["rules"].items():
                lines.append(f"  over {b['replications']['count']} replications, {rid} rejects {r['rejection_rate']:.3f}")
        lines.append(f"verdict: {b['verdict']['status']}")
    elif b["command"] == "pretrial":
        p, r = b["protocol"], b["result"]
        lines.append(f"protocol {p['id']} ({p['purpose']}), registered={p['registered']}")
        if p["purpose"] == "timing":
            lines.append(f"recommended measurement time {_fmt(r['recommended_time'])} (window {r['window']})")
            lines.append(f"note: {r['assumption']}")
        elif p["purpose"] == "placebo":
            lines.append(f"placebo effect on {r['outcome']}: {_fmt(r['placebo_effect'])}")
        else:
            s = r["screen"]
            lines.append(f"{s['kind']} fraction {_fmt(s['fraction'])}; agreement with truth {_fmt(r['truth_check']['agreement'])}")
        if "exclusions" in b:
            lines.append(f"excluded units: {len(b['exclusions']['units'])}")
        lines.extend(f"note: {n}" for n in b["notes"])
    elif b["command"] == "power":
        pw = b["power"]
        lines.append(f"rule {pw['rule']}, {pw['replications']} replications per cell")
        lines.append("arm_size  magnitude  power   mc_se")
        for row in pw["grid"]:
            lines.append(f"{row['arm_size']:>8}  {row['magnitude']:>9.4g}  {row['power']:.3f}  {row['mc_se']:.4f}")
    lines.append(f"report sha256 {report.digest}")
    return lines


__all__ = [
    "RunReport", "run_simulate", "run_diagnose", "run_pretrial", "run_power", "experiment_for",
    "EXIT_PASS", "EXIT_ERROR", "EXIT_REJECT",
]
