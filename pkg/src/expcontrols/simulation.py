"""Simulating experiments from a science table.

Pipeline for one run: shift the table by unintended-factor effects, draw an
assignment, select each unit's latent outcome at its assigned level, then add
measurement error. Every random draw comes from a substream keyed by
``(seed, purpose, unit, outcome)`` so results do not depend on iteration order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import rng
from .errors import DomainError, ResourceLimitError, UnknownIdError
from .science import (
    Assignment,
    ObservedDataset,
    ScienceTable,
    TreatmentKind,
    Unit,
)

DEFAULT_ENUMERATION_CAP = 10**6
_PROB_TOL = 1e-9


class MechanismKind(str, Enum):
    COMPLETE_RANDOMIZATION = "complete_randomization"
    BERNOULLI = "bernoulli"
    FACTOR_CONFOUNDED = "factor_confounded"


@dataclass(frozen=True)
class Confounder:
    """Per-factor-level assignment probabilities, e.g. stressed units go to the active arm."""

    factor: str
    rows: Mapping[str, Mapping[str, float]]


@dataclass(frozen=True)
class AssignmentMechanism:
    kind: MechanismKind
    arm_sizes: Mapping[str, int] | None = None
    arm_probs: Mapping[str, float] | None = None
    confounder: Confounder | None = None

    def __post_init__(self) -> None:
        kind = MechanismKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is MechanismKind.COMPLETE_RANDOMIZATION:
            if not self.arm_sizes:
                raise DomainError("complete_randomization requires arm_sizes")
            for t, n in self.arm_sizes.items():
                if int(n) != n or n < 0:
                    raise DomainError(f"arm size for {t!r} must be a non-negative integer")
        elif kind is MechanismKind.BERNOULLI:
            if not self.arm_probs:
                raise DomainError("bernoulli requires arm_probs")
            _check_probs(self.arm_probs, "arm_probs")
        else:
            if self.confounder is None or not self.confounder.rows:
                raise DomainError("factor_confounded requires a confounder with probability rows")
            for level, row in self.confounder.rows.items():
                _check_probs(row, f"confounder row {level!r}")

    @classmethod
    def complete(cls, arm_sizes: Mapping[str, int]) -> "AssignmentMechanism":
        return cls(MechanismKind.COMPLETE_RANDOMIZATION, arm_sizes=dict(arm_sizes))

    @classmethod
    def bernoulli(cls, arm_probs: Mapping[str, float]) -> "AssignmentMechanism":
        return cls(MechanismKind.BERNOULLI, arm_probs=dict(arm_probs))

    @classmethod
    def confounded(cls, factor: str, rows: Mapping[str, Mapping[str, float]]) -> "AssignmentMechanism":
        return cls(MechanismKind.FACTOR_CONFOUNDED, confounder=Confounder(factor, rows))

    @property
    def tag(self) -> str:
        return self.kind.value

    @property
    def arms(self) -> tuple[str, ...]:
        if self.kind is MechanismKind.COMPLETE_RANDOMIZATION:
            return tuple(self.arm_sizes)
        if self.kind is MechanismKind.BERNOULLI:
            return tuple(self.arm_probs)
        seen: dict[str, None] = {}
        for row in self.confounder.rows.values():
            seen.update(dict.fromkeys(row))
        return tuple(seen)

    def resized(self, arm_size: int) -> "AssignmentMechanism":
        """Same arms, every arm holding ``arm_size`` units."""
        if self.kind is not MechanismKind.COMPLETE_RANDOMIZATION:
            raise DomainError("only complete_randomization mechanisms can be resized")
        return AssignmentMechanism.complete({t: arm_size for t in self.arm_sizes})


def _check_probs(probs: Mapping[str, float], what: str) -> None:
    vals = list(probs.values())
    if any(p < 0 or not math.isfinite(p) for p in vals):
        raise DomainError(f"{what}: probabilities must be finite and non-negative")
    if abs(sum(vals) - 1.0) > _PROB_TOL:
        raise DomainError(f"{what}: probabilities sum to {sum(vals)}, not 1")


@dataclass(frozen=True)
class FactorEffect:
    """Additive shift on ``outcome`` for units at ``factor == level``, under every treatment."""

    factor: str
    level: str
    outcome: str
    shift: float
    id: str = ""


class NoiseKind(str, Enum):
    NONE = "none"
    ADDITIVE_GAUSSIAN = "additive_gaussian"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.NONE
    sigma: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        for k, s in self.sigma.items():
            if not (math.isfinite(s) and s >= 0):
                raise DomainError(f"noise sigma for {k!r} must be finite and >= 0")

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(NoiseKind.NONE)

    @classmethod
    def gaussian(cls, sigma: Mapping[str, float]) -> "NoiseModel":
        return cls(NoiseKind.ADDITIVE_GAUSSIAN, dict(sigma))

    def sd(self, outcome: str) -> float:
        if self.kind is NoiseKind.NONE:
            return 0.0
        try:
            return float(self.sigma[outcome])
        except KeyError:
            raise DomainError(f"noise model has no sigma for outcome {outcome!r}") from None

    def with_sigma(self, outcome: str, sigma: float) -> "NoiseModel":
        return NoiseModel(NoiseKind.ADDITIVE_GAUSSIAN, {**self.sigma, outcome: sigma})


@dataclass(frozen=True)
class ResponseCurve:
    """Triangular response: zero until ``onset``, linear rise to ``peak_time``,
    linear decay to zero at ``decay_time``."""

    onset: float
    peak_time: float
    decay_time: float
    peak_amplitude: float = 1.0

    def __post_init__(self) -> None:
        if not (0 <= self.onset < self.peak_time < self.decay_time):
            raise DomainError("response curve needs 0 <= onset < peak_time < decay_time")

    def shape(self, t) -> np.ndarray:
        """Unit-peak profile, 1 at ``peak_time``."""
        t = np.asarray(t, dtype=float)
        rise = (t - self.onset) / (self.peak_time - self.onset)
        fall = (self.decay_time - t) / (self.decay_time - self.peak_time)
        out = np.where(t <= self.peak_time, rise, fall)
        return np.where((t <= self.onset) | (t >= self.decay_time), 0.0, out)

    def value(self, t) -> np.ndarray:
        return self.peak_amplitude * self.shape(t)


# -- assignment ---------------------------------------------------------------


def _unit_list(units) -> list[Unit]:
    if isinstance(units, ScienceTable):
        return list(units.units)
    return [u if isinstance(u, Unit) else Unit(str(u)) for u in units]


def _check_mechanism(mechanism: AssignmentMechanism, units: Sequence[Unit]) -> None:
    if mechanism.kind is MechanismKind.COMPLETE_RANDOMIZATION:
        total = sum(mechanism.arm_sizes.values())
        if total != len(units):
            raise DomainError(f"arm sizes sum to {total} but there are {len(units)} units")
    elif mechanism.kind is MechanismKind.FACTOR_CONFOUNDED:
        name = mechanism.confounder.factor
        for u in units:
            if name not in u.factors:
                raise UnknownIdError("factor", name)
            if u.factors[name] not in mechanism.confounder.rows:
                raise DomainError(
                    f"no assignment probabilities for {name}={u.factors[name]!r} (unit {u.id!r})"
                )


def assignment_codes(
    mechanism: AssignmentMechanism, units, seeds: Sequence[int]
) -> tuple[tuple[str, ...], np.ndarray]:
    """Arm index of every unit in every replication, shape ``(len(seeds), n_units)``."""
    units = _unit_list(units)
    _check_mechanism(mechanism, units)
    arms = mechanism.arms
    n = len(units)
    u = rng.uniforms(rng.stream_keys(list(seeds), [("assign", x.id) for x in units]), 0)
    if mechanism.kind is MechanismKind.COMPLETE_RANDOMIZATION:
        order = np.argsort(u, axis=1, kind="stable")
        ranks = np.empty_like(order)
        ranks[np.arange(len(seeds))[:, None], order] = np.arange(n)
        bounds = np.cumsum([mechanism.arm_sizes[a] for a in arms])
        return arms, np.searchsorted(bounds, ranks, side="right")
    if mechanism.kind is MechanismKind.BERNOULLI:
        cum = np.cumsum([mechanism.arm_probs[a] for a in arms])
        return arms, np.minimum(np.searchsorted(cum, u, side="right"), len(arms) - 1)
    rows = mechanism.confounder.rows
    name = mechanism.confounder.factor
    cum = np.array([np.cumsum([rows[x.factors[name]].get(a, 0.0) for a in arms]) for x in units])
    codes = (u[..., None] >= cum[None, :, :]).sum(axis=2)
    return arms, np.minimum(codes, len(arms) - 1)


def assign(mechanism: AssignmentMechanism, units, seed: int) -> Assignment:
    units = _unit_list(units)
    arms, codes = assignment_codes(mechanism, units, [seed])
    return Assignment({x.id: arms[c] for x, c in zip(units, codes[0])}, mechanism.tag)


def count_assignments(mechanism: AssignmentMechanism, n_units: int) -> int:
    if mechanism.kind is not MechanismKind.COMPLETE_RANDOMIZATION:
        raise DomainError("exact enumeration is only defined for complete_randomization")
    sizes = list(mechanism.arm_sizes.values())
    if sum(sizes) != n_units:
        raise DomainError(f"arm sizes sum to {sum(sizes)} but there are {n_units} units")
    total, left = 1, n_units
    for s in sizes:
        total *= math.comb(left, s)
        left -= s
    return total


def enumerate_assignments(
    mechanism: AssignmentMechanism, units, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[Assignment]:
    """Every complete-randomization assignment exactly once.

    Canonical order: lexicographic over the unit combinations of the first arm,
    then of the second arm among the remaining units, and so on.
    """
    units = _unit_list(units)
    ids = [u.id for u in units]
    total = count_assignments(mechanism, len(ids))
    if total > cap:
        raise ResourceLimitError(
            f"{total} assignments exceed the enumeration cap {cap}; use Monte Carlo replications"
        )
    arms = list(mechanism.arm_sizes.items())
    out: list[Assignment] = []

    def rec(k: int, remaining: list[str], acc: dict[str, str]) -> None:
        if k == len(arms):
            out.append(Assignment({u: acc[u] for u in ids}, mechanism.tag))
            return
        arm, size = arms[k]
        for chosen in itertools.combinations(remaining, size):
            chosen_set = set(chosen)
            rec(k + 1, [u for u in remaining if u not in chosen_set], {**acc, **dict.fromkeys(chosen, arm)})

    rec(0, ids, {})
    return out


# -- outcomes -----------------------------------------------------------------


def apply_factor_effects(table: ScienceTable, effects: Sequence[FactorEffect]) -> ScienceTable:
    if not effects:
        return table
    values = np.array(table.values)
    for eff in effects:
        if eff.factor not in table.factor_levels:
            raise DomainError(f"unknown factor {eff.factor!r}")
        if eff.level not in table.factor_levels[eff.factor]:
            raise DomainError(f"unknown level {eff.level!r} for factor {eff.factor!r}")
        k = table.outcome_index(eff.outcome)
        mask = table.factor_column(eff.factor) == eff.level
        values[mask, k, :] += eff.shift
    return table.with_values(values)


def measure(latent: float, model: NoiseModel, outcome: str, substream: rng.Substream, counter: int = 0) -> float:
    """One noisy reading of ``latent``; ``counter`` selects the draw within the substream."""
    if model.kind is NoiseKind.NONE:
        return float(latent)
    sd = model.sd(outcome)
    if sd == 0:
        return float(latent)
    return float(latent + sd * substream.normal(1, start=counter)[0])


def noncompliance_level(table: ScienceTable) -> str | None:
    levels = table.treatments_of_kind(TreatmentKind.NULL_TREATMENT_CONTROL)
    return levels[0] if len(levels) == 1 else None


@dataclass(frozen=True)
class Experiment:
    """Everything needed to simulate one design, minus the seed."""

    table: ScienceTable
    mechanism: AssignmentMechanism
    effects: tuple[FactorEffect, ...] = ()
    noise: NoiseModel = field(default_factory=NoiseModel.none)
    measured_outcomes: tuple[str, ...] | None = None
    tag: str = ""
    # noncompliers' readings come from this level's latent column
    fallback_level: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "effects", tuple(self.effects))
        if self.measured_outcomes is not None:
            object.__setattr__(self, "measured_outcomes", tuple(self.measured_outcomes))

    def with_(self, **changes) -> "Experiment":
        return replace(self, **changes)

    def simulate(self, seed: int) -> ObservedDataset:
        return self.replicate([seed])[0]

    def replicate(self, seeds: Sequence[int]) -> list[ObservedDataset]:
        return simulate_replications(
            self.table, self.mechanism, self.effects, self.noise,
            self.measured_outcomes, seeds, self.tag, self.fallback_level,
        )


def simulate_replications(
    table: ScienceTable,
    mechanism: AssignmentMechanism,
    effects: Sequence[FactorEffect],
    noise: NoiseModel,
    measured_outcomes: Sequence[str] | None,
    seeds: Sequence[int],
    scenario_tag: str = "",
    fallback_level: str | None = None,
) -> list[ObservedDataset]:
    """One :class:`ObservedDataset` per seed; row ``r`` equals a single run at ``seeds[r]``."""
    seeds = [int(s) for s in seeds]
    outcomes = list(measured_outcomes) if measured_outcomes is not None else list(table.outcome_ids)
    shifted = apply_factor_effects(table, effects)
    arms, codes = assignment_codes(mechanism, table.units, seeds)
    arm_cols = np.array([shifted.treatment_index(a) for a in arms])
    tcols = arm_cols[codes]

    noncompliant = np.array([u.complier_truth is False for u in table.units])
    if noncompliant.any():
        level = fallback_level or noncompliance_level(table)
        if level is None:
            raise DomainError("noncompliant units need a no-intervention level to fall back to")
        tcols = np.where(noncompliant[None, :], shifted.treatment_index(level), tcols)

    n = len(table)
    rows = np.arange(n)[None, :]
    measured: list[dict[str, np.ndarray]] = [{} for _ in seeds]
    for o in outcomes:
        k = shifted.outcome_index(o)
        latent = shifted.values[rows, k, tcols]
        sd = noise.sd(o)
        if sd > 0:
            keys = rng.stream_keys(seeds, [("measure", u, o) for u in table.unit_ids])
            latent = latent + sd * rng.normals(keys, 0)
        for r in range(len(seeds)):
            measured[r][o] = latent[r]

    out = []
    for r, s in enumerate(seeds):
        w = dict(zip(table.unit_ids, (arms[c] for c in codes[r])))
        out.append(
            ObservedDataset(Assignment(w, mechanism.tag), table.unit_ids, measured[r], None, s, scenario_tag)
        )
    return out


def simulate_experiment(
    table: ScienceTable,
    mechanism: AssignmentMechanism,
    effects: Sequence[FactorEffect],
    noise: NoiseModel,
    measured_outcomes: Sequence[str] | None,
    seed: int,
    scenario_tag: str = "",
    fallback_level: str | None = None,
) -> ObservedDataset:
    return simulate_replications(
        table, mechanism, effects, noise, measured_outcomes, [seed], scenario_tag, fallback_level
    )[0]


def _check_times(times: Sequence[float]) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise DomainError("times must be a non-empty list")
    if np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise DomainError("times must be non-negative and strictly increasing")
    return t


def simulate_timecourse(
    table: ScienceTable,
    curve_per_unit: Mapping[str, ResponseCurve],
    treatment: str,
    outcome: str,
    times: Sequence[float],
    noise: NoiseModel,
    seed: int,
) -> dict[tuple[str, float], float]:
    """Repeated readings after one intervention; each unit's curve peaks at its latent value."""
    t = _check_times(times)
    latent = table.column(outcome, treatment)
    sd = noise.sd(outcome)
    out: dict[tuple[str, float], float] = {}
    for i, u in enumerate(table.unit_ids):
        curve = curve_per_unit[u]
        vals = latent[i] * curve.shape(t)
        if sd > 0:
            keys = np.full(t.size, rng.stream_keys(seed, [("timecourse", u, outcome, treatment)])[0])
            vals = vals + sd * rng.normals(keys, np.arange(t.size, dtype=np.uint64))
        for tt, v in zip(t, vals):
            out[(u, float(tt))] = float(v)
    return out


@dataclass(frozen=True, eq=False)
class CrossoverData:
    """Pre-trial readings: every unit measured ``replicates`` times under each level.

    ``readings[(outcome, treatment)]`` has shape ``(n_units, replicates)``.
    """

    unit_ids: tuple[str, ...]
    replicates: int
    readings: Mapping[tuple[str, str], np.ndarray]


def simulate_crossover(
    table: ScienceTable,
    contrasts: Sequence[tuple[str, str, str]],
    replicates: int,
    noise: NoiseModel,
    seed: int,
) -> CrossoverData:
    """Measure each ``(outcome, active, control)`` contrast within every unit."""
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    readings: dict[tuple[str, str], np.ndarray] = {}
    reps = np.arange(replicates, dtype=np.uint64)
    for outcome, active, control in contrasts:
        sd = noise.sd(outcome)
        for level in (active, control):
            if (outcome, level) in readings:
                continue
            vals = np.repeat(table.column(outcome, level)[:, None], replicates, axis=1)
            if sd > 0:
                keys = rng.stream_keys(seed, [("crossover", u, outcome, level) for u in table.unit_ids])
                vals = vals + sd * rng.normals(keys[:, None], reps[None, :])
            readings[(outcome, level)] = vals
    return CrossoverData(table.unit_ids, replicates, readings)
