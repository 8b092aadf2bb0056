"""Versioned YAML scenario files.

A scenario describes one experiment end to end: treatment levels, outcomes,
the ground-truth science table (inline or generated), control declarations,
the assignment mechanism, unintended-factor effects, measurement noise,
decision rules, pre-trial protocols and an optional power grid.

:func:`parse_scenario` validates everything and reports *all* problems at
once. :meth:`Scenario.to_dict` returns the normalised form, so
``parse(serialize(parse(x))) == parse(x)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from . import rng
from .controls import ControlDeclaration, ControlKind
from .diagnostics import DecisionRule, RuleKind, TestMethod
from .errors import DomainError, ExpControlsError, ScenarioError
from .pretrial import ExclusionList, PretrialProtocol, Purpose
from .science import OutcomeDef, OutcomeRole, ScienceTable, TreatmentKind, TreatmentLevel, Unit
from .simulation import AssignmentMechanism, Confounder, FactorEffect, MechanismKind, NoiseKind, NoiseModel

SCHEMA_VERSION = 1
SHIPPED_DIR = Path(__file__).with_name("scenarios")


def shipped_scenario_path(name: str) -> Path:
    """Path of a bundled scenario, e.g. ``shipped_scenario_path("caffeine")``."""
    return SHIPPED_DIR / f"{name}.yaml"


class _Errors:
    def __init__(self) -> None:
        self.items: list[str] = []

    def add(self, where: str, msg: str) -> None:
        self.items.append(f"{where}: {msg}")

    def guard(self, where: str, fn: Callable[[], Any], default=None):
        try:
            return fn()
        except (ExpControlsError, KeyError, TypeError, ValueError) as exc:
            msg = str(exc) if not isinstance(exc, KeyError) else f"missing field {exc.args[0]!r}"
            self.add(where, msg)
            return default


def _f(x) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TypeError(f"expected a number, got {x!r}")
    return float(x)


def _opt_f(x):
    return None if x is None else _f(x)


def _i(x) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise TypeError(f"expected an integer, got {x!r}")
    return x


# -- section parsers -------------------------------------------------------------------


def _treatment(d: Mapping) -> TreatmentLevel:
    return TreatmentLevel(str(d["id"]), str(d.get("label", "")), TreatmentKind(d.get("kind", "other")),
                          str(d.get("description", "")))


def _treatment_dict(t: TreatmentLevel) -> dict:
    d = {"id": t.id, "label": t.label, "kind": t.kind.value}
    if t.description:
        d["description"] = t.description
    return d


def _outcome(d: Mapping) -> OutcomeDef:
    return OutcomeDef(str(d["id"]), str(d.get("label", "")), str(d.get("units", "")),
                      OutcomeRole(d.get("role", "secondary")), _f(d.get("null_value", 0.0)))


def _outcome_dict(o: OutcomeDef) -> dict:
    return {"id": o.id, "label": o.label, "units": o.units, "role": o.role.value, "null_value": o.null_value}


def _control(d: Mapping) -> ControlDeclaration:
    contrast = d.get("contrast")
    return ControlDeclaration(
        ControlKind(d["kind"]),
        str(d["outcome"]),
        None if d.get("treatment") is None else str(d["treatment"]),
        None if contrast is None else (str(contrast[0]), str(contrast[1])),
        _opt_f(d.get("null_value")),
        _f(d.get("epsilon", 0.0)),
        _opt_f(d.get("min_magnitude")),
        str(d["id"]),
        str(d.get("label", "")),
    )


def _control_dict(c: ControlDeclaration) -> dict:
    d: dict[str, Any] = {"id": c.id, "label": c.label, "kind": c.kind.value, "outcome": c.outcome}
    if c.treatment is not None:
        d["treatment"] = c.treatment
    if c.contrast is not None:
        d["contrast"] = list(c.contrast)
    d["null_value"] = c.null_value
    d["epsilon"] = c.epsilon
    d["min_magnitude"] = c.min_magnitude
    return d


def _mechanism(d: Mapping) -> AssignmentMechanism:
    kind = MechanismKind(d["kind"])
    if kind is MechanismKind.COMPLETE_RANDOMIZATION:
        return AssignmentMechanism.complete({str(k): _i(v) for k, v in d["arm_sizes"].items()})
    if kind is MechanismKind.BERNOULLI:
        return AssignmentMechanism.bernoulli({str(k): _f(v) for k, v in d["arm_probs"].items()})
    conf = d["confounder"]
    rows = {str(lv): {str(a): _f(p) for a, p in row.items()} for lv, row in conf["rows"].items()}
    return AssignmentMechanism.confounded(str(conf["factor"]), rows)


def _mechanism_dict(m: AssignmentMechanism) -> dict:
    if m.kind is MechanismKind.COMPLETE_RANDOMIZATION:
        return {"kind": m.kind.value, "arm_sizes": dict(m.arm_sizes)}
    if m.kind is MechanismKind.BERNOULLI:
        return {"kind": m.kind.value, "arm_probs": dict(m.arm_probs)}
    return {
        "kind": m.kind.value,
        "confounder": {"factor": m.confounder.factor,
                       "rows": {k: dict(v) for k, v in m.confounder.rows.items()}},
    }


def _effect(d: Mapping) -> FactorEffect:
    return FactorEffect(str(d["factor"]), str(d["level"]), str(d["outcome"]), _f(d["shift"]), str(d.get("id", "")))


def _effect_dict(e: FactorEffect) -> dict:
    return {"id": e.id, "factor": e.factor, "level": e.level, "outcome": e.outcome, "shift": e.shift}


def _noise(d: Mapping | None) -> NoiseModel:
    if d is None:
        return NoiseModel.none()
    kind = NoiseKind(d.get("kind", "none"))
    sigma = {str(k): _f(v) for k, v in (d.get("sigma") or {}).items()}
    if kind is NoiseKind.ADDITIVE_GAUSSIAN and not sigma:
        raise DomainError("additive_gaussian noise needs an explicit sigma per outcome")
    return NoiseModel(kind, sigma)


def _noise_dict(n: NoiseModel) -> dict:
    return {"kind": n.kind.value, "sigma": dict(n.sigma)}


def _rule(d: Mapping) -> DecisionRule:
    kind = RuleKind(d["kind"])
    return DecisionRule(
        kind,
        _opt_f(d.get("threshold_A")),
        _opt_f(d.get("fraction")),
        _opt_f(d.get("alpha")),
        None if d.get("method") is None else TestMethod(d["method"]),
        str(d.get("id", "")),
    )


def _rule_dict(r: DecisionRule) -> dict:
    d: dict[str, Any] = {"id": r.id, "kind": r.kind.value}
    if r.kind is RuleKind.MEAN_TEST:
        d.update(alpha=r.alpha, method=r.method.value)
    else:
        d["threshold_A"] = r.threshold_A
        if r.kind is RuleKind.FRACTION_COUNT:
            d["fraction"] = r.fraction
    return d


def _protocol(d: Mapping) -> PretrialProtocol:
    return PretrialProtocol(
        str(d["id"]),
        Purpose(d["purpose"]),
        tuple(str(c) for c in d.get("controls", ())),
        _i(d.get("per_unit_replicates", 1)),
        _opt_f(d.get("decision_threshold")),
        _opt_f(d.get("alpha")),
        bool(d.get("registered", False)),
        str(d.get("mode", "threshold")),
        _normalize_options(d.get("options") or {}),
    )


def _normalize_options(opts: Mapping) -> dict:
    out = dict(opts)
    if "times" in out:
        out["times"] = [_f(t) for t in out["times"]]
    if "curve" in out:
        out["curve"] = {k: _f(v) for k, v in out["curve"].items()}
    if "fraction" in out:
        out["fraction"] = _f(out["fraction"])
    return out


def _generator(d: Mapping) -> dict:
    """Normalised generator block; validated here, expanded by :func:`generate_table`."""
    n = _i(d["n_units"])
    if n < 1:
        raise DomainError("n_units must be >= 1")
    resp = _values_block(d["responder_values"])
    nonresp = _values_block(d["nonresponder_values"]) if d.get("nonresponder_values") else None
    factors = {}
    for name, levels in (d.get("factors") or {}).items():
        fr = {str(lv): _f(p) for lv, p in levels.items()}
        if any(p < 0 for p in fr.values()) or abs(sum(fr.values()) - 1) > 1e-9:
            raise DomainError(f"factor {name!r}: level fractions must be >= 0 and sum to 1")
        factors[str(name)] = fr
    out = {
        "n_units": n,
        "unit_prefix": str(d.get("unit_prefix", "u")),
        "seed": None if d.get("seed") is None else _i(d["seed"]),
        "responder_fraction": _f(d.get("responder_fraction", 1.0)),
        "complier_fraction": _f(d.get("complier_fraction", 1.0)),
        "factors": factors,
        "responder_values": resp,
    }
    for key in ("responder_fraction", "complier_fraction"):
        if not 0 <= out[key] <= 1:
            raise DomainError(f"{key} must lie in [0, 1]")
    if nonresp is not None:
        out["nonresponder_values"] = nonresp
    return out


def _values_block(d: Mapping) -> dict:
    return {str(o): {str(t): _f(v) for t, v in row.items()} for o, row in d.items()}


def _inline_units(units: list) -> list[dict]:
    out = []
    for u in units:
        d = {"id": str(u["id"]), "factors": {str(k): str(v) for k, v in (u.get("factors") or {}).items()}}
        for key in ("responder", "complier"):
            if u.get(key) is not None:
                d[key] = bool(u[key])
        d["values"] = _values_block(u["values"])
        out.append(d)
    return out


# -- table generation ------------------------------------------------------------------------


def _exact_counts(fractions: Mapping[str, float], n: int) -> dict[str, int]:
    """Largest-remainder allocation of ``n`` units to levels."""
    raw = {k: f * n for k, f in fractions.items()}
    counts = {k: int(math.floor(v + 1e-9)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), list(raw).index(k)))[:left]:
        counts[k] += 1
    return counts


def _keyed_order(seed: int, purpose: str, ids: list[str]) -> list[str]:
    u = rng.uniforms(rng.stream_keys(seed, [(purpose, x) for x in ids]), 0)
    return [ids[i] for i in np.argsort(u, kind="stable")]


def unit_ids_for(prefix: str, n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate_table(
    gen: Mapping,
    outcomes: list[OutcomeDef],
    treatments: list[TreatmentLevel],
    seed: int,
    n_units: int | None = None,
) -> ScienceTable:
    n = n_units or gen["n_units"]
    seed = gen["seed"] if gen.get("seed") is not None else seed
    ids = unit_ids_for(gen["unit_prefix"], n)

    def pick(purpose: str, fraction: float) -> set[str]:
        k = _exact_counts({"yes": fraction, "no": 1 - fraction}, n)["yes"]
        return set(_keyed_order(seed, purpose, ids)[:k])

    responders = pick("responder", gen["responder_fraction"])
    compliers = pick("complier", gen["complier_fraction"])
    labels: dict[str, dict[str, str]] = {u: {} for u in ids}
    for name, fr in gen["factors"].items():
        order = _keyed_order(seed, f"factor:{name}", ids)
        pos = 0
        for level, count in _exact_counts(fr, n).items():
            for u in order[pos:pos + count]:
                labels[u][name] = level
            pos += count
    units = [Unit(u, labels[u], u in responders, u in compliers) for u in ids]
    resp = gen["responder_values"]
    nonresp = gen.get("nonresponder_values") or resp
    arr = np.empty((n, len(outcomes), len(treatments)))
    for k, o in enumerate(outcomes):
        for j, t in enumerate(treatments):
            try:
                r, nr = resp[o.id][t.id], nonresp[o.id][t.id]
            except KeyError:
                raise DomainError(f"generator has no value for ({o.id!r}, {t.id!r})") from None
            arr[:, k, j] = [r if u.responder_truth else nr for u in units]
    levels = {name: list(fr) for name, fr in gen["factors"].items()}
    return ScienceTable(units, outcomes, treatments, arr, levels)


def inline_table(units: list[dict], outcomes: list[OutcomeDef], treatments: list[TreatmentLevel]) -> ScienceTable:
    us = [Unit(u["id"], u["factors"], u.get("responder"), u.get("complier")) for u in units]
    values = {u["id"]: u["values"] for u in units}
    return ScienceTable.from_nested(values, outcomes, treatments, us)


# -- scenario ------------------------------------------------------------------------------------


@dataclass(eq=False)
class Scenario:
    data: dict
    treatments: list[TreatmentLevel]
    outcomes: list[OutcomeDef]
    controls: list[ControlDeclaration]
    mechanism: AssignmentMechanism
    effects: list[FactorEffect]
    noise: NoiseModel
    measured_outcomes: list[str]
    rules: list[DecisionRule]
    protocols: list[PretrialProtocol]
    exclusions: ExclusionList | None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.data == other.data

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def primary_outcome(self) -> str:
        return next(o.id for o in self.outcomes if o.role is OutcomeRole.PRIMARY)

    @property
    def active(self) -> str:
        return next(t.id for t in self.treatments if t.kind is TreatmentKind.ACTIVE)

    @property
    def primary_control(self) -> str:
        return self.data["primary_control"]

    @property
    def null_tc(self) -> str | None:
        return self.data["diagnostics"]["null_tc"]

    @property
    def multiplicity(self) -> str:
        return self.data["multiplicity"]

    @property
    def diagnostics(self) -> dict:
        return self.data["diagnostics"]

    @property
    def power(self) -> dict | None:
        return self.data.get("power")

    def control(self, ident: str) -> ControlDeclaration:
        for c in self.controls:
            if c.id == ident:
                return c
        raise DomainError(f"no control declaration {ident!r}")

    def protocol(self, ident: str) -> PretrialProtocol:
        for p in self.protocols:
            if p.id == ident:
                return p
        raise DomainError(f"no pretrial protocol {ident!r}")

    def rule(self, ident: str) -> DecisionRule:
        for r in self.rules:
            if r.id == ident:
                return r
        raise DomainError(f"no decision rule {ident!r}")

    def effect(self, ident: str) -> FactorEffect:
        for e in self.effects:
            if e.id == ident:
                return e
        raise DomainError(f"no factor effect {ident!r}")

    def build_table(self, seed: int | None = None, n_units: int | None = None,
                    apply_exclusions: bool = True) -> ScienceTable:
        spec = self.data["science_table"]
        if "generator" in spec:
            table = generate_table(spec["generator"], self.outcomes, self.treatments,
                                   self.seed if seed is None else seed, n_units)
        else:
            if n_units is not None and n_units != len(spec["units"]):
                raise DomainError("inline science tables cannot be resized")
            table = inline_table(spec["units"], self.outcomes, self.treatments)
        if apply_exclusions and self.exclusions is not None:
            table = self.exclusions.apply(table)
        return table

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_yaml(self) -> str:
        return serialize_scenario(self)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_changes(self, **sections) -> "Scenario":
        """Re-validated copy with top-level sections replaced."""
        d = self.to_dict()
        d.update(copy.deepcopy(sections))
        return scenario_from_dict(d)


def serialize_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False, allow_unicode=True)


def parse_scenario(source: str | os.PathLike) -> Scenario:
    """Parse a scenario from a file path or from YAML text."""
    if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source and os.path.exists(source)):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError([f"cannot read {path}: {exc}"]) from None
        return parse_scenario_text(text)
    return parse_scenario_text(str(source))


def parse_scenario_text(text: str) -> Scenario:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ScenarioError([f"syntax error at {where}: {exc.problem or exc}"]) from None
    except yaml.YAMLError as exc:
        raise ScenarioError([f"syntax error: {exc}"]) from None
    if not isinstance(raw, Mapping):
        raise ScenarioError(["scenario must be a mapping at top level"])
    return scenario_from_dict(raw)


def scenario_from_dict(raw: Mapping) -> Scenario:
    err = _Errors()
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError([f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})"])

    def section_list(key: str, parser, required: bool = True) -> list:
        items = raw.get(key)
        if items is None:
            if required:
                err.add(key, "missing section")
            return []
        if not isinstance(items, list):
            err.add(key, "must be a list")
            return []
        out = []
        for i, item in enumerate(items):
            where = f"{key}[{i}]" + (f" ({item.get('id')})" if isinstance(item, Mapping) and item.get("id") else "")
            if not isinstance(item, Mapping):
                err.add(where, "must be a mapping")
                continue
            obj = err.guard(where, lambda item=item: parser(item))
            if obj is not None:
                out.append(obj)
        return out

    treatments = section_list("treatments", _treatment)
    outcomes = section_list("outcomes", _outcome)
    controls = section_list("controls", _control, required=False)
    effects = section_list("factor_effects", _effect, required=False)
    rules = section_list("decision_rules", _rule, required=False)
    protocols = section_list("pretrial_protocols", _protocol, required=False)

    t_ids = [t.id for t in treatments]
    o_ids = [o.id for o in outcomes]
    for what, ids in (("treatments", t_ids), ("outcomes", o_ids), ("controls", [c.id for c in controls]),
                      ("decision_rules", [r.id for r in rules]), ("pretrial_protocols", [p.id for p in protocols])):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            err.add(what, f"duplicate ids: {', '.join(dupes)}")
    effect_ids = [e.id for e in effects if e.id]
    if len(set(effect_ids)) != len(effect_ids):
        err.add("factor_effects", "duplicate ids")

    primaries = [o.id for o in outcomes if o.role is OutcomeRole.PRIMARY]
    if len(primaries) != 1:
        err.add("outcomes", f"exactly one primary outcome required, found {len(primaries)}: {', '.join(primaries) or 'none'}")
    actives = [t.id for t in treatments if t.kind is TreatmentKind.ACTIVE]
    if len(actives) != 1:
        err.add("treatments", f"exactly one active treatment required, found {len(actives)}: {', '.join(actives) or 'none'}")

    def check_t(where: str, t: str | None) -> None:
        if t is not None and t not in t_ids:
            err.add(where, f"unknown treatment {t!r}")

    def check_o(where: str, o: str | None) -> None:
        if o is not None and o not in o_ids:
            err.add(where, f"unknown outcome {o!r}")

    primary_control = raw.get("primary_control")
    if primary_control is None:
        err.add("primary_control", "missing")
    else:
        primary_control = str(primary_control)
        check_t("primary_control", primary_control)
        if actives and primary_control in actives:
            err.add("primary_control", "must differ from the active treatment")

    for c in controls:
        where = f"controls ({c.id})"
        check_o(where, c.outcome)
        check_t(where, c.treatment)
        for t in c.contrast or ():
            check_t(where, t)
        if c.kind.axis == "treatment" and primaries and c.outcome != primaries[0]:
            err.add(where, "treatment controls constrain the primary outcome")
        if c.kind.axis == "outcome":
            if primaries and c.outcome == primaries[0]:
                err.add(where, "outcome controls use a secondary outcome")
            if actives and c.treatment != actives[0]:
                err.add(where, "outcome controls are declared under the active treatment")

    # science table
    table_raw = raw.get("science_table")
    table_norm = None
    factor_levels: dict[str, list[str]] = {}
    if not isinstance(table_raw, Mapping) or ("generator" in table_raw) == ("units" in table_raw):
        err.add("science_table", "needs exactly one of 'generator' or 'units'")
    elif "generator" in table_raw:
        gen = err.guard("science_table.generator", lambda: _generator(table_raw["generator"]))
        if gen is not None:
            table_norm = {"generator": gen}
            factor_levels = {k: list(v) for k, v in gen["factors"].items()}
            for block in ("responder_values", "nonresponder_values"):
                for o, row in gen.get(block, {}).items():
                    check_o(f"science_table.generator.{block}", o)
                    for t in row:
                        check_t(f"science_table.generator.{block}.{o}", t)
                for o in o_ids:
                    if block in gen:
                        missing = [t for t in t_ids if t not in gen[block].get(o, {})]
                        if missing:
                            err.add(f"science_table.generator.{block}", f"outcome {o!r} lacks values for {missing}")
    else:
        units = err.guard("science_table.units", lambda: _inline_units(table_raw["units"]))
        if units is not None:
            table_norm = {"units": units}
            for u in units:
                for name, lv in u["factors"].items():
                    factor_levels.setdefault(name, [])
                    if lv not in factor_levels[name]:
                        factor_levels[name].append(lv)
                for o in o_ids:
                    missing = [t for t in t_ids if t not in u["values"].get(o, {})]
                    if missing:
                        err.add(f"science_table.units ({u['id']})", f"outcome {o!r} lacks values for {missing}")
                extra = [o for o in u["values"] if o not in o_ids]
                if extra:
                    err.add(f"science_table.units ({u['id']})", f"unknown outcomes {extra}")

    mechanism = None
    if not isinstance(raw.get("assignment"), Mapping):
        err.add("assignment", "missing section")
    else:
        mechanism = err.guard("assignment", lambda: _mechanism(raw["assignment"]))
        if mechanism is not None:
            for a in mechanism.arms:
                check_t("assignment", a)
            if mechanism.kind is MechanismKind.FACTOR_CONFOUNDED:
                name = mechanism.confounder.factor
                if name not in factor_levels:
                    err.add("assignment.confounder", f"unknown factor {name!r}")
                else:
                    missing = [lv for lv in factor_levels[name] if lv not in mechanism.confounder.rows]
                    if missing:
                        err.add("assignment.confounder", f"no probability row for levels {missing}")
            if mechanism.kind is MechanismKind.COMPLETE_RANDOMIZATION and table_norm is not None:
                n = table_norm["generator"]["n_units"] if "generator" in table_norm else len(table_norm["units"])
                total = sum(mechanism.arm_sizes.values())
                if total != n:
                    err.add("assignment", f"arm sizes sum to {total} but the table has {n} units")

    for e in effects:
        where = f"factor_effects ({e.id or e.factor})"
        check_o(where, e.outcome)
        if e.factor not in factor_levels:
            err.add(where, f"unknown factor {e.factor!r}")
        elif e.level not in factor_levels[e.factor]:
            err.add(where, f"unknown level {e.level!r} for factor {e.factor!r}")

    noise = err.guard("noise", lambda: _noise(raw.get("noise")), NoiseModel.none())
    measured = raw.get("measured_outcomes")
    measured = [str(o) for o in measured] if measured is not None else list(o_ids)
    for o in measured:
        check_o("measured_outcomes", o)
    if noise.kind is NoiseKind.ADDITIVE_GAUSSIAN:
        missing = [o for o in measured if o not in noise.sigma]
        if missing:
            err.add("noise", f"no sigma for measured outcomes {missing}")

    multiplicity = str(raw.get("multiplicity", "none"))
    if multiplicity not in ("none", "bonferroni"):
        err.add("multiplicity", f"unknown method {multiplicity!r}")

    diag_raw = raw.get("diagnostics") or {}
    ntcs = [t.id for t in treatments if t.kind is TreatmentKind.NULL_TREATMENT_CONTROL]
    null_tc = diag_raw.get("null_tc", ntcs[0] if len(ntcs) == 1 else None)
    check_t("diagnostics.null_tc", null_tc)
    diagnostics = {
        "null_tc": null_tc,
        "method": err.guard("diagnostics.method", lambda: TestMethod(diag_raw.get("method", "sign_permutation")).value),
        "confounding_alpha": err.guard("diagnostics.confounding_alpha", lambda: _f(diag_raw.get("confounding_alpha", 0.05))),
    }
    if primaries and primaries[0] not in measured:
        err.add("measured_outcomes", "the primary outcome must be measured")

    control_ids = [c.id for c in controls]
    for p in protocols:
        where = f"pretrial_protocols ({p.id})"
        for c in p.controls:
            if c not in control_ids:
                err.add(where, f"unknown control {c!r}")
        if p.purpose is not Purpose.PLACEBO and not p.controls:
            err.add(where, "must list the controls it uses")
        if p.purpose is Purpose.TIMING and "times" not in p.options:
            err.add(where, "timing protocols need options.times")
        if p.purpose is Purpose.PLACEBO:
            for key in ("blinded", "unblinded", "disclosure_factor", "blinded_level"):
                if key not in p.options:
                    err.add(where, f"placebo protocols need options.{key}")
            check_t(where, p.options.get("blinded"))
            check_t(where, p.options.get("unblinded"))

    power = None
    if raw.get("power") is not None:
        power = err.guard("power", lambda: _power(raw["power"]))
        if power is not None:
            if power["rule"] not in [r.id for r in rules]:
                err.add("power", f"unknown rule {power['rule']!r}")
            flaw = power["flaw"]
            if "effect" in flaw and flaw["effect"] not in effect_ids:
                err.add("power.flaw", f"unknown factor effect {flaw['effect']!r}")
            if "noise" in flaw:
                check_o("power.flaw", flaw["noise"])

    exclusions = None
    if raw.get("exclusions") is not None:
        exclusions = err.guard("exclusions", lambda: ExclusionList.from_dict(raw["exclusions"]))
        if exclusions is not None:
            ref = next((p for p in protocols if p.id == exclusions.protocol_id), None)
            if ref is not None:
                if not ref.registered:
                    err.add("exclusions", f"protocol {ref.id!r} is not registered")
                elif ref.digest() != exclusions.protocol_digest:
                    err.add("exclusions", f"digest does not match protocol {ref.id!r}")

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        err.add("seed", "must be a non-negative integer")

    if err.items:
        raise ScenarioError(err.items)

    data = {
        "schema_version": SCHEMA_VERSION,
        "name": str(raw.get("name", "scenario")),
        "description": str(raw.get("description", "")),
        "seed": seed,
        "treatments": [_treatment_dict(t) for t in treatments],
        "outcomes": [_outcome_dict(o) for o in outcomes],
        "primary_control": primary_control,
        "science_table": table_norm,
        "controls": [_control_dict(c) for c in controls],
        "assignment": _mechanism_dict(mechanism),
        "factor_effects": [_effect_dict(e) for e in effects],
        "noise": _noise_dict(noise),
        "measured_outcomes": measured,
        "decision_rules": [_rule_dict(r) for r in rules],
        "multiplicity": multiplicity,
        "diagnostics": diagnostics,
        "pretrial_protocols": [p.to_dict() for p in protocols],
    }
    if power is not None:
        data["power"] = power
    if exclusions is not None:
        data["exclusions"] = exclusions.to_dict()
    scenario = Scenario(data, treatments, outcomes, controls, mechanism, effects, noise, measured,
                        rules, protocols, exclusions)
    try:
        scenario.build_table()
    except ExpControlsError as exc:
        raise ScenarioError([f"science_table: {exc}"]) from None
    return scenario


def _power(d: Mapping) -> dict:
    flaw = d.get("flaw") or {}
    if ("effect" in flaw) == ("noise" in flaw):
        raise DomainError("flaw must name exactly one of 'effect' or 'noise'")
    sizes = [_i(x) for x in d.get("arm_sizes") or []]
    mags = [_f(x) for x in d.get("magnitudes") or []]
    if not sizes and not mags:
        raise DomainError("power grid is empty")
    if any(s < 1 for s in sizes):
        raise DomainError("arm sizes must be >= 1")
    return {
        "rule": str(d["rule"]),
        "flaw": {k: str(v) for k, v in flaw.items()},
        "arm_sizes": sizes,
        "magnitudes": mags,
        "replications": _i(d.get("replications", 1000)),
    }
