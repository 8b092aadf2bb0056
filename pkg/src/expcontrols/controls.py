"""The six experimental-control kinds and their validation against ground truth.

Controls sit on two axes: null vs non-null, and treatment vs outcome vs
contrast. Each declaration names the quantity it constrains for every unit:

=========================  ===========================================
kind                       constrained quantity
=========================  ===========================================
null_treatment_control     ``Y_i^p(w_nt)`` is null
non_null_treatment_control ``Y_i^p(w_nnt)`` is not null
null_outcome_control       ``Y_i^k(w_at)`` is null, ``k`` secondary
non_null_outcome_control   ``Y_i^k(w_at)`` is not null
null_contrast_control      ``Y_i^k(a) - Y_i^k(c)`` is null
non_null_contrast_control  ``Y_i^k(a) - Y_i^k(c)`` is not null
=========================  ===========================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError
from .science import ScienceTable


class ControlKind(str, Enum):
    NULL_TREATMENT = "null_treatment_control"
    NON_NULL_TREATMENT = "non_null_treatment_control"
    NULL_OUTCOME = "null_outcome_control"
    NON_NULL_OUTCOME = "non_null_outcome_control"
    NULL_CONTRAST = "null_contrast_control"
    NON_NULL_CONTRAST = "non_null_contrast_control"

    @property
    def is_null(self) -> bool:
        return not self.value.startswith("non_null")

    @property
    def axis(self) -> str:
        return self.value.rsplit("_", 2)[-2]

    @property
    def dual(self) -> "ControlKind":
        name = "non_" + self.value if self.is_null else self.value[len("non_"):]
        return ControlKind(name)


class NcxLabel(str, Enum):
    NEGATIVE_CONTROL_OUTCOME = "negative_control_outcome"
    NEGATIVE_CONTROL_EXPOSURE = "negative_control_exposure"
    POSITIVE_CONTROL_OUTCOME = "positive_control_outcome"
    POSITIVE_CONTROL_EXPOSURE = "positive_control_exposure"
    GENERIC_CONTRAST_CONTROL = "generic_contrast_control"
    NOT_A_CONTRAST_CONTROL = "not_a_contrast_control"


@dataclass(frozen=True)
class ControlDeclaration:
    """A declared control and the tolerance bands used to check it.

    ``treatment`` is the control level for treatment kinds and the active level
    for outcome kinds; contrast kinds use ``contrast = (active, control)``.
    ``null_value=None`` means: the outcome's own null value for treatment and
    outcome kinds, 0 for contrasts. ``min_magnitude=None`` means the next float
    above ``epsilon``.
    """

    kind: ControlKind
    outcome: str
    treatment: str | None = None
    contrast: tuple[str, str] | None = None
    null_value: float | None = None
    epsilon: float = 0.0
    min_magnitude: float | None = None
    id: str = ""
    label: str = ""

    def __post_init__(self) -> None:
        kind = ControlKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.contrast is not None:
            object.__setattr__(self, "contrast", tuple(self.contrast))
        if kind.axis == "contrast":
            if self.contrast is None or len(self.contrast) != 2:
                raise DomainError(f"{kind.value} requires a (active, control) contrast pair")
            if self.contrast[0] == self.contrast[1]:
                raise DomainError("contrast levels must be distinct")
        else:
            if self.contrast is not None:
                raise DomainError(f"{kind.value} must not declare a contrast")
            if self.treatment is None:
                raise DomainError(f"{kind.value} requires a treatment level")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise DomainError("epsilon must be finite and >= 0")
        if self.min_magnitude is not None and not self.min_magnitude > self.epsilon:
            raise DomainError(
                f"min_magnitude ({self.min_magnitude}) must exceed epsilon ({self.epsilon})"
            )

    @property
    def nonzero_floor(self) -> float:
        if self.min_magnitude is not None:
            return self.min_magnitude
        return math.nextafter(self.epsilon, math.inf)

    def resolved_null_value(self, table: ScienceTable) -> float:
        if self.null_value is not None:
            return self.null_value
        if self.kind.axis == "contrast":
            return 0.0
        return table.outcome(self.outcome).null_value

    def with_kind(self, kind: ControlKind | str) -> "ControlDeclaration":
        return ControlDeclaration(
            kind, self.outcome, self.treatment, self.contrast, self.null_value,
            self.epsilon, self.min_magnitude, self.id, self.label,
        )

    def swapped(self) -> "ControlDeclaration":
        if self.contrast is None:
            raise DomainError("only contrast declarations can be swapped")
        a, c = self.contrast
        return ControlDeclaration(
            self.kind, self.outcome, None, (c, a), self.null_value,
            self.epsilon, self.min_magnitude, self.id, self.label,
        )


@dataclass(frozen=True)
class UnitCheck:
    value: float
    holds: bool


@dataclass(frozen=True)
class ControlValidationReport:
    per_unit: dict[str, UnitCheck] = field(default_factory=dict)
    fraction_holding: float = 0.0
    holds_for_all: bool = False
    declaration_id: str = ""
    kind: str = ""

    def to_dict(self) -> dict:
        return {
            "declaration": self.declaration_id,
            "kind": self.kind,
            "fraction_holding": self.fraction_holding,
            "holds_for_all": self.holds_for_all,
            "per_unit": {u: {"value": c.value, "holds": c.holds} for u, c in self.per_unit.items()},
        }


def control_values(decl: ControlDeclaration, table: ScienceTable) -> np.ndarray:
    """:func:`control_value` for every unit, in table order."""
    if decl.kind.axis == "contrast":
        active, control = decl.contrast
        return table.column(decl.outcome, active) - table.column(decl.outcome, control)
    return table.column(decl.outcome, decl.treatment).copy()


def control_value(decl: ControlDeclaration, table: ScienceTable, unit: str) -> float:
    return float(control_values(decl, table)[table.unit_index(unit)])


def holds_mask(decl: ControlDeclaration, values: np.ndarray, null_value: float) -> np.ndarray:
    dev = np.abs(np.asarray(values, dtype=float) - null_value)
    if decl.kind.is_null:
        return dev <= decl.epsilon
    return dev >= decl.nonzero_floor


def validate_control(decl: ControlDeclaration, table: ScienceTable) -> ControlValidationReport:
    vals = control_values(decl, table)
    holds = holds_mask(decl, vals, decl.resolved_null_value(table))
    n = len(vals)
    per_unit = {u: UnitCheck(float(v), bool(h)) for u, v, h in zip(table.unit_ids, vals, holds)}
    count = int(np.count_nonzero(holds))
    fraction = count / n if n else 0.0
    return ControlValidationReport(
        per_unit, fraction, n > 0 and count == n, decl.id, decl.kind.value
    )


def contrast_control_effect(decl: ControlDeclaration, table: ScienceTable) -> float:
    """Ground-truth average of a contrast control over all units."""
    if decl.kind.axis != "contrast":
        raise DomainError(f"{decl.kind.value} is not a contrast control")
    if len(table) == 0:
        raise DomainError("average effect of an empty table is undefined")
    return float(np.mean(control_values(decl, table)))


def classify_ncx(
    decl: ControlDeclaration,
    primary_outcome: str,
    primary_active: str,
    primary_control: str,
) -> NcxLabel:
    """Map a declaration onto negative/positive control outcome/exposure terms."""
    if decl.kind.axis != "contrast":
        return NcxLabel.NOT_A_CONTRAST_CONTROL
    sign = "negative" if decl.kind.is_null else "positive"
    primary_pair = tuple(decl.contrast) == (primary_active, primary_control)
    if decl.outcome == primary_outcome and not primary_pair:
        return NcxLabel(f"{sign}_control_exposure")
    if decl.outcome != primary_outcome and primary_pair:
        return NcxLabel(f"{sign}_control_outcome")
    return NcxLabel.GENERIC_CONTRAST_CONTROL
