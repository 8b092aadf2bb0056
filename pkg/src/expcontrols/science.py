"""Potential-outcomes data model: science tables, assignments, observed data.

A :class:`ScienceTable` stores the latent potential outcome of every unit for
every outcome under every treatment level, so the table itself encodes SUTVA:
one value per (unit, outcome, treatment), no interference terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, EmptyArmError, UnknownIdError


class TreatmentKind(str, Enum):
    ACTIVE = "active"
    CONTROL_TREATMENT = "control_treatment"
    NULL_TREATMENT_CONTROL = "null_treatment_control"
    NON_NULL_TREATMENT_CONTROL = "non_null_treatment_control"
    OTHER = "other"


class OutcomeRole(str, Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"


@dataclass(frozen=True)
class TreatmentLevel:
    id: str
    label: str = ""
    kind: TreatmentKind = TreatmentKind.OTHER
    description: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TreatmentKind(self.kind))


@dataclass(frozen=True)
class OutcomeDef:
    id: str
    label: str = ""
    units: str = ""
    role: OutcomeRole = OutcomeRole.SECONDARY
    # value meaning "no change"; 1 for ratio outcomes
    null_value: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", OutcomeRole(self.role))


@dataclass(frozen=True)
class Unit:
    id: str
    factors: Mapping[str, str] = field(default_factory=dict)
    responder_truth: bool | None = None
    complier_truth: bool | None = None


def _unique(ids: Sequence[str], what: str) -> None:
    seen = set()
    dupes = sorted({i for i in ids if i in seen or seen.add(i)})
    if dupes:
        raise DomainError(f"duplicate {what} ids: {', '.join(dupes)}")


class ScienceTable:
    """Ground-truth potential outcomes ``Y_i^k(w_j)``.

    ``values`` has shape ``(n_units, n_outcomes, n_treatments)`` and is frozen
    after construction; derived tables are new objects.
    """

    def __init__(
        self,
        units: Sequence[Unit],
        outcomes: Sequence[OutcomeDef],
        treatments: Sequence[TreatmentLevel],
        values,
        factor_levels: Mapping[str, Sequence[str]] | None = None,
    ) -> None:
        self.units = tuple(units)
        self.outcomes = tuple(outcomes)
        self.treatments = tuple(treatments)
        self.unit_ids = tuple(u.id for u in self.units)
        self.outcome_ids = tuple(o.id for o in self.outcomes)
        self.treatment_ids = tuple(t.id for t in self.treatments)
        _unique(self.unit_ids, "unit")
        _unique(self.outcome_ids, "outcome")
        _unique(self.treatment_ids, "treatment")

        primaries = [o.id for o in self.outcomes if o.role is OutcomeRole.PRIMARY]
        if len(primaries) != 1:
            raise DomainError(
                f"exactly one primary outcome required, found {len(primaries)}: {primaries}"
            )

        arr = np.array(values, dtype=np.float64, copy=True)
        shape = (len(self.units), len(self.outcomes), len(self.treatments))
        if arr.shape != shape:
            raise DomainError(f"values shape {arr.shape} does not match table shape {shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("science table values must all be finite")
        arr.flags.writeable = False
        self.values = arr

        keysets = {frozenset(u.factors) for u in self.units}
        if len(keysets) > 1:
            raise DomainError("units must share a common set of factor names")
        self.factor_names = tuple(sorted(next(iter(keysets)))) if keysets else ()
        levels: dict[str, tuple[str, ...]] = {}
        for name in self.factor_names:
            seen = tuple(dict.fromkeys(u.factors[name] for u in self.units))
            declared = tuple(factor_levels.get(name, ())) if factor_levels else ()
            extra = [lv for lv in seen if lv not in declared]
            levels[name] = declared + tuple(extra)
        self.factor_levels = levels

        self._u = {u: i for i, u in enumerate(self.unit_ids)}
        self._o = {o: i for i, o in enumerate(self.outcome_ids)}
        self._t = {t: i for i, t in enumerate(self.treatment_ids)}

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_nested(
        cls,
        values: Mapping[str, Mapping[str, Mapping[str, float]]],
        outcomes: Sequence[OutcomeDef | str] | None = None,
        treatments: Sequence[TreatmentLevel | str] | None = None,
        units: Sequence[Unit] | None = None,
        factor_levels: Mapping[str, Sequence[str]] | None = None,
    ) -> "ScienceTable":
        """Build from ``values[unit][outcome][treatment]``.

        Plain string outcome ids are accepted; the first becomes the primary.
        Missing triples raise, so the result is always total.
        """
        if units is None:
            units = [Unit(u) for u in values]
        if outcomes is None:
            first = next(iter(values.values()))
            outcomes = list(first)
        if treatments is None:
            first = next(iter(values.values()))
            treatments = list(next(iter(first.values())))
        outs = [
            o if isinstance(o, OutcomeDef)
            else OutcomeDef(o, role=OutcomeRole.PRIMARY if i == 0 else OutcomeRole.SECONDARY)
            for i, o in enumerate(outcomes)
        ]
        trts = [t if isinstance(t, TreatmentLevel) else TreatmentLevel(t) for t in treatments]
        arr = np.empty((len(units), len(outs), len(trts)))
        for i, u in enumerate(units):
            row = values.get(u.id)
            if row is None:
                raise DomainError(f"science table has no values for unit {u.id!r}")
            for k, o in enumerate(outs):
                cell = row.get(o.id)
                if cell is None:
                    raise DomainError(f"unit {u.id!r} has no values for outcome {o.id!r}")
                for j, t in enumerate(trts):
                    if t.id not in cell:
                        raise DomainError(
                            f"missing potential outcome for ({u.id!r}, {o.id!r}, {t.id!r})"
                        )
                    arr[i, k, j] = cell[t.id]
        return cls(units, outs, trts, arr, factor_levels)

    def to_nested(self) -> dict[str, dict[str, dict[str, float]]]:
        return {
            u: {
                o: {t: float(self.values[i, k, j]) for j, t in enumerate(self.treatment_ids)}
                for k, o in enumerate(self.outcome_ids)
            }
            for i, u in enumerate(self.unit_ids)
        }

    def with_values(self, values) -> "ScienceTable":
        return ScienceTable(self.units, self.outcomes, self.treatments, values, self.factor_levels)

    def subset(self, unit_ids: Iterable[str]) -> "ScienceTable":
        idx = [self.unit_index(u) for u in unit_ids]
        return ScienceTable(
            [self.units[i] for i in idx], self.outcomes, self.treatments,
            self.values[idx], self.factor_levels,
        )

    # -- lookups ----------------------------------------------------------------

    def unit_index(self, unit: str) -> int:
        try:
            return self._u[unit]
        except KeyError:
            raise UnknownIdError("unit", unit) from None

    def outcome_index(self, outcome: str) -> int:
        try:
            return self._o[outcome]
        except KeyError:
            raise UnknownIdError("outcome", outcome) from None

    def treatment_index(self, treatment: str) -> int:
        try:
            return self._t[treatment]
        except KeyError:
            raise UnknownIdError("treatment", treatment) from None

    def outcome(self, outcome: str) -> OutcomeDef:
        return self.outcomes[self.outcome_index(outcome)]

    def treatment(self, treatment: str) -> TreatmentLevel:
        return self.treatments[self.treatment_index(treatment)]

    def unit(self, unit: str) -> Unit:
        return self.units[self.unit_index(unit)]

    @property
    def primary_outcome(self) -> str:
        return next(o.id for o in self.outcomes if o.role is OutcomeRole.PRIMARY)

    def treatments_of_kind(self, kind: TreatmentKind | str) -> list[str]:
        kind = TreatmentKind(kind)
        return [t.id for t in self.treatments if t.kind is kind]

    def column(self, outcome: str, treatment: str) -> np.ndarray:
        """Potential outcomes of every unit, in unit order."""
        return self.values[:, self.outcome_index(outcome), self.treatment_index(treatment)]

    def factor_column(self, name: str) -> np.ndarray:
        if name not in self.factor_names:
            raise UnknownIdError("factor", name)
        return np.array([u.factors[name] for u in self.units], dtype=object)

    def __len__(self) -> int:
        return len(self.units)

    def __repr__(self) -> str:
        return (
            f"ScienceTable(units={len(self.units)}, outcomes={list(self.outcome_ids)}, "
            f"treatments={list(self.treatment_ids)})"
        )


@dataclass(frozen=True)
class Assignment:
    """Realised treatment level ``W_i`` for every unit."""

    w: Mapping[str, str]
    mechanism_tag: str = ""

    def levels(self, unit_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.w[u] for u in unit_ids])
        except KeyError as exc:
            raise DomainError(f"unit {exc.args[0]!r} is not in the assignment") from None

    def arm_sizes(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for t in self.w.values():
            counts[t] = counts.get(t, 0) + 1
        return counts

    def validate_against(self, table: ScienceTable) -> None:
        missing = [u for u in table.unit_ids if u not in self.w]
        if missing:
            raise DomainError(f"units without an assigned level: {missing}")
        for t in set(self.w.values()):
            table.treatment_index(t)


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    """Observed outcomes ``Y_i^{k,obs}`` of one run, aligned to ``unit_ids``."""

    assignment: Assignment
    unit_ids: tuple[str, ...]
    measured: Mapping[str, np.ndarray]
    measurement_time: float | None = None
    seed: int = 0
    scenario_tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "_levels", self.assignment.levels(self.unit_ids))
        object.__setattr__(self, "_pos", {u: i for i, u in enumerate(self.unit_ids)})

    @property
    def levels(self) -> np.ndarray:
        return self._levels

    def outcome_values(self, outcome: str) -> np.ndarray:
        try:
            return self.measured[outcome]
        except KeyError:
            raise UnknownIdError("measured outcome", outcome) from None

    def value(self, unit: str, outcome: str) -> float:
        try:
            i = self._pos[unit]
        except KeyError:
            raise UnknownIdError("unit", unit) from None
        return float(self.outcome_values(outcome)[i])

    def arm_mask(self, treatment: str) -> np.ndarray:
        return self._levels == treatment

    def arm_values(self, outcome: str, treatment: str) -> np.ndarray:
        return self.outcome_values(outcome)[self._levels == treatment]

    def as_map(self) -> dict[tuple[str, str], float]:
        return {
            (u, o): float(v[i])
            for o, v in self.measured.items()
            for i, u in enumerate(self.unit_ids)
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservedDataset):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and dict(self.assignment.w) == dict(other.assignment.w)
            and self.assignment.mechanism_tag == other.assignment.mechanism_tag
            and list(self.measured) == list(other.measured)
            and all(np.array_equal(self.measured[k], other.measured[k]) for k in self.measured)
            and self.measurement_time == other.measurement_time
            and self.seed == other.seed
            and self.scenario_tag == other.scenario_tag
        )


# -- estimand arithmetic ------------------------------------------------------


def potential_outcome(table: ScienceTable, unit: str, outcome: str, treatment: str) -> float:
    return float(
        table.values[
            table.unit_index(unit), table.outcome_index(outcome), table.treatment_index(treatment)
        ]
    )


def unit_effect(table: ScienceTable, unit: str, outcome: str, active: str, control: str) -> float:
    """Unit-level effect ``Y_i(active) - Y_i(control)``."""
    return potential_outcome(table, unit, outcome, active) - potential_outcome(
        table, unit, outcome, control
    )


def unit_effects(table: ScienceTable, outcome: str, active: str, control: str) -> np.ndarray:
    return table.column(outcome, active) - table.column(outcome, control)


def average_effect(table: ScienceTable, outcome: str, active: str, control: str) -> float:
    """Finite-population average effect over all units in the table."""
    if len(table) == 0:
        raise DomainError("average effect of an empty table is undefined")
    return float(np.mean(unit_effects(table, outcome, active, control)))


def observed_outcome(table: ScienceTable, assignment: Assignment, unit: str, outcome: str) -> float:
    """Latent outcome selected by the unit's assigned level (no measurement error)."""
    try:
        level = assignment.w[unit]
    except KeyError:
        raise DomainError(f"unit {unit!r} is not in the assignment") from None
    return potential_outcome(table, unit, outcome, level)


def group_mean_observed(dataset: ObservedDataset, outcome: str, treatment: str) -> float:
    vals = dataset.arm_values(outcome, treatment)
    if vals.size == 0:
        raise EmptyArmError(treatment)
    return float(np.mean(vals))


def difference_in_means(dataset: ObservedDataset, outcome: str, active: str, control: str) -> float:
    return group_mean_observed(dataset, outcome, active) - group_mean_observed(
        dataset, outcome, control
    )
