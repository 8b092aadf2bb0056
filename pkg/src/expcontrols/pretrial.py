"""Design-stage procedures: timing pilots, responder and complier screens,
placebo contrasts, and responder/nonresponder effect decomposition.

Screens that remove units from a later study must be fixed in advance, so
exclusion lists can only be produced from protocols marked ``registered``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .controls import ControlDeclaration, ControlKind
from .errors import DomainError, EmptyArmError, NoSignalError, ProtocolViolationError, UnregisteredProtocolError
from .science import ObservedDataset, ScienceTable, unit_effects
from .simulation import CrossoverData

RESPONDER, NONRESPONDER = "responder", "nonresponder"
COMPLIER, NONCOMPLIER, INDETERMINATE = "complier", "noncomplier", "indeterminate"

TIMING_ASSUMPTION = (
    "assumes the pilot intervention/outcome and the primary treatment/outcome "
    "respond on similar time scales (not checked)"
)


class Purpose(str, Enum):
    TIMING = "timing"
    RESPONDERS = "responders"
    COMPLIERS = "compliers"
    PLACEBO = "placebo"


@dataclass(frozen=True)
class PretrialProtocol:
    """A pre-specified pre-trial procedure.

    ``controls`` lists the ids of the control declarations it relies on.
    Purpose-specific settings live in ``options`` (times and curve for timing
    pilots, blinded/unblinded levels for placebo designs, ...).
    """

    id: str
    purpose: Purpose
    controls: tuple[str, ...] = ()
    per_unit_replicates: int = 1
    decision_threshold: float | None = None
    alpha: float | None = None
    registered: bool = False
    mode: str = "threshold"
    options: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "purpose", Purpose(self.purpose))
        object.__setattr__(self, "controls", tuple(self.controls))
        if self.per_unit_replicates < 1:
            raise DomainError("per_unit_replicates must be >= 1")
        if self.mode not in ("threshold", "test"):
            raise DomainError(f"unknown screening mode {self.mode!r}")
        if self.mode == "test" and (self.alpha is None or not 0 < self.alpha < 1):
            raise DomainError("test mode requires alpha in (0, 1)")

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "purpose": self.purpose.value,
            "controls": list(self.controls),
            "per_unit_replicates": self.per_unit_replicates,
            "decision_threshold": self.decision_threshold,
            "alpha": self.alpha,
            "registered": self.registered,
            "mode": self.mode,
        }
        if self.options:
            d["options"] = _plain(self.options)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_threshold(noise_sd: float, replicates: int) -> float:
    """Three standard errors of a within-unit contrast estimate.

    The estimate differences two means of ``replicates`` readings, each with
    noise ``noise_sd``, so its standard error is ``noise_sd * sqrt(2 / replicates)``.
    """
    return 3.0 * noise_sd * math.sqrt(2.0 / replicates)


@dataclass(frozen=True)
class SubgroupReport:
    responder_fraction: float
    responder_effect: float | None
    nonresponder_effect: float | None
    population_effect: float | None
    per_unit_calls: dict[str, str]
    partial: tuple[str, ...] = ()
    kind: str = "responders"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "fraction": self.responder_fraction,
            "group_effect": self.responder_effect,
            "other_effect": self.nonresponder_effect,
            "population_effect": self.population_effect,
            "partial": list(self.partial),
            "per_unit_calls": dict(self.per_unit_calls),
        }


@dataclass(frozen=True)
class TimingResult:
    time: float
    window: tuple[float, float] | None
    mean_curve: dict[float, float]
    assumption: str = TIMING_ASSUMPTION

    def to_dict(self) -> dict:
        return {
            "recommended_time": self.time,
            "window": list(self.window) if self.window else None,
            "mean_abs_response": {repr(t): v for t, v in self.mean_curve.items()},
            "assumption": self.assumption,
        }


@dataclass(frozen=True)
class ExclusionList:
    protocol_id: str
    protocol_digest: str
    units: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol_id,
            "protocol_digest": self.protocol_digest,
            "units": list(self.units),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExclusionList":
        return cls(str(d["protocol"]), str(d["protocol_digest"]), tuple(str(u) for u in d["units"]))

    def apply(self, table: ScienceTable) -> ScienceTable:
        unknown = [u for u in self.units if u not in table.unit_ids]
        if unknown:
            raise DomainError(f"exclusion list names units not in the table: {unknown}")
        drop = set(self.units)
        return table.subset([u for u in table.unit_ids if u not in drop])


# -- timing -------------------------------------------------------------------------


def mean_abs_curve(timecourse: Mapping[tuple[str, float], float]) -> dict[float, float]:
    by_time: dict[float, list[float]] = {}
    for (_, t), v in timecourse.items():
        by_time.setdefault(float(t), []).append(abs(v))
    return {t: float(np.mean(by_time[t])) for t in sorted(by_time)}


def optimal_timing(
    timecourse: Mapping[tuple[str, float], float],
    criterion: str = "peak_of_mean",
    fraction: float = 0.5,
) -> TimingResult:
    """Pick a measurement time from pilot readings ``{(unit, time): value}``.

    ``peak_of_mean`` returns the earliest time maximising the across-unit mean
    absolute response. ``window_above_fraction`` returns the contiguous run of
    sampled times around that peak where the mean stays at or above
    ``fraction * peak``, recommending its midpoint.
    """
    if not timecourse:
        raise DomainError("empty timecourse")
    curve = mean_abs_curve(timecourse)
    times = np.array(list(curve))
    means = np.array(list(curve.values()))
    peak = float(means.max())
    if peak <= 0:
        raise NoSignalError("pilot shows no response at any sampled time")
    i = int(np.flatnonzero(means >= peak * (1 - 1e-12))[0])
    if criterion == "peak_of_mean":
        return TimingResult(float(times[i]), None, curve)
    if criterion != "window_above_fraction":
        raise DomainError(f"unknown timing criterion {criterion!r}")
    if not 0 < fraction <= 1:
        raise DomainError("fraction must lie in (0, 1]")
    above = means >= fraction * peak
    lo = hi = i
    while lo > 0 and above[lo - 1]:
        lo -= 1
    while hi < len(times) - 1 and above[hi + 1]:
        hi += 1
    window = (float(times[lo]), float(times[hi]))
    return TimingResult((window[0] + window[1]) / 2, window, curve)


# -- responders -------------------------------------------------------------------------


def _contrast_of(control) -> tuple[str, str, str]:
    if isinstance(control, ControlDeclaration):
        if control.kind is not ControlKind.NON_NULL_CONTRAST:
            raise ProtocolViolationError(
                f"responder screens use non-null contrast controls, got {control.kind.value}"
            )
        return (control.outcome, *control.contrast)
    return tuple(control)


def _readings(data: CrossoverData, outcome: str, level: str, replicates: int) -> np.ndarray:
    arr = data.readings.get((outcome, level))
    if arr is None:
        raise ProtocolViolationError(f"no pre-trial readings of {outcome!r} under {level!r}")
    arr = np.asarray(arr, dtype=float)
    if arr.shape != (len(data.unit_ids), replicates) or not np.all(np.isfinite(arr)):
        raise ProtocolViolationError(
            f"readings of {outcome!r} under {level!r} need {replicates} finite replicates per unit"
        )
    return arr


def _welch_nonzero(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    diff = a.mean(axis=1) - b.mean(axis=1)
    r = a.shape[1]
    if r < 2:
        raise ProtocolViolationError("test mode needs at least 2 replicates per level")
    se = np.sqrt(a.var(axis=1, ddof=1) / r + b.var(axis=1, ddof=1) / r)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / se
    p = 2 * stats.t.sf(np.abs(t), 2 * r - 2)
    return np.where(se == 0, diff != 0, p < alpha)


def identify_responders(
    data: CrossoverData,
    controls: Sequence[ControlDeclaration | tuple[str, str, str]],
    protocol: PretrialProtocol,
    thresholds: Sequence[float] | None = None,
) -> SubgroupReport:
    """Call each unit responder/nonresponder from within-unit contrast estimates.

    A unit is a nonresponder only if every listed contrast is within the
    no-effect band. Units nonzero on some but not all contrasts are counted as
    responders and listed in ``partial``. Effects in the report decompose the
    estimated contrast of the first control. ``thresholds`` gives one band per
    control and overrides the protocol's single ``decision_threshold``.
    """
    if not controls:
        raise ProtocolViolationError("responder screen needs at least one non-null contrast control")
    reps = protocol.per_unit_replicates
    if thresholds is not None and len(thresholds) != len(controls):
        raise ProtocolViolationError("need one threshold per control")
    estimates, nonzero = [], []
    for i, c in enumerate(controls):
        outcome, active, control = _contrast_of(c)
        a = _readings(data, outcome, active, reps)
        b = _readings(data, outcome, control, reps)
        est = a.mean(axis=1) - b.mean(axis=1)
        estimates.append(est)
        if protocol.mode == "test":
            nonzero.append(_welch_nonzero(a, b, protocol.alpha))
        else:
            band = thresholds[i] if thresholds is not None else protocol.decision_threshold
            if band is None:
                raise ProtocolViolationError("threshold mode needs a decision_threshold")
            nonzero.append(np.abs(est) > band)
    nz = np.array(nonzero)
    responder = nz.any(axis=0)
    partial_mask = responder & ~nz.all(axis=0)
    partial = tuple(u for u, p in zip(data.unit_ids, partial_mask) if p)
    if partial:
        warnings.warn(
            f"{len(partial)} unit(s) respond on some but not all contrast controls; "
            "counted as responders",
            stacklevel=2,
        )
    calls = {u: RESPONDER if r else NONRESPONDER for u, r in zip(data.unit_ids, responder)}
    return _decompose(estimates[0], responder, calls, partial)


def _decompose(effects: np.ndarray, responder: np.ndarray, calls, partial=(), kind="responders") -> SubgroupReport:
    n = effects.size
    if n == 0:
        raise DomainError("no units to decompose")
    frac = float(np.count_nonzero(responder)) / n
    r_eff = float(np.mean(effects[responder])) if responder.any() else None
    nr_eff = float(np.mean(effects[~responder])) if (~responder).any() else None
    pop = float(np.mean(effects))
    recombined = (frac * r_eff if r_eff is not None else 0.0) + (
        (1 - frac) * nr_eff if nr_eff is not None else 0.0
    )
    scale = max(1.0, float(np.max(np.abs(effects))))
    if abs(recombined - pop) > 1e-9 * scale:
        raise DomainError("decomposition identity failed")
    return SubgroupReport(frac, r_eff, nr_eff, pop, dict(calls), tuple(partial), kind)


def decompose_effect(
    table: ScienceTable,
    responder_calls: Mapping[str, str | bool],
    outcome: str,
    active: str,
    control: str,
) -> SubgroupReport:
    """Split the average effect into responder and nonresponder parts.

    ``population = fraction * responder_effect + (1 - fraction) * nonresponder_effect``;
    an empty group's effect is ``None``.
    """
    missing = [u for u in table.unit_ids if u not in responder_calls]
    if missing:
        raise DomainError(f"responder calls missing for units: {missing}")

    def is_resp(v) -> bool:
        return v is True or v == RESPONDER

    responder = np.array([is_resp(responder_calls[u]) for u in table.unit_ids])
    calls = {u: RESPONDER if r else NONRESPONDER for u, r in zip(table.unit_ids, responder)}
    return _decompose(unit_effects(table, outcome, active, control), responder, calls)


# -- compliers --------------------------------------------------------------------------


def identify_compliers(
    dataset: ObservedDataset,
    nno_control: ControlDeclaration,
    protocol: PretrialProtocol,
    null_value: float | None = None,
) -> SubgroupReport:
    """Call active-arm units noncompliers when a change known to follow the
    treatment is absent (``|obs - null| <= decision_threshold``).

    Units in other arms are ``indeterminate``. ``responder_fraction`` in the
    returned report is the complier fraction among callable units.
    """
    if nno_control.kind is not ControlKind.NON_NULL_OUTCOME:
        raise ProtocolViolationError(
            f"complier screens use a non-null outcome control, got {nno_control.kind.value}"
        )
    if protocol.decision_threshold is None:
        raise ProtocolViolationError("complier screen needs a decision_threshold")
    try:
        vals = dataset.outcome_values(nno_control.outcome)
    except LookupError:
        raise ProtocolViolationError(f"outcome {nno_control.outcome!r} was not measured") from None
    exposed = dataset.arm_mask(nno_control.treatment)
    if not exposed.any():
        raise EmptyArmError(nno_control.treatment)
    if not np.all(np.isfinite(vals[exposed])):
        raise ProtocolViolationError("missing measurements for active-arm units")
    if null_value is None:
        null_value = nno_control.null_value if nno_control.null_value is not None else 0.0
    noncomp = np.abs(vals - null_value) <= protocol.decision_threshold
    calls = {}
    for u, e, nc in zip(dataset.unit_ids, exposed, noncomp):
        calls[u] = INDETERMINATE if not e else (NONCOMPLIER if nc else COMPLIER)
    compliers = exposed & ~noncomp
    frac = float(np.count_nonzero(compliers)) / int(np.count_nonzero(exposed))
    return SubgroupReport(frac, None, None, None, calls, (), "compliers")


# -- placebo ----------------------------------------------------------------------------


def placebo_effect(dataset: ObservedDataset, outcome: str, blinded: str, unblinded: str) -> float:
    """Mean outcome of blinded control units minus units told they get no treatment."""
    a = dataset.arm_values(outcome, blinded)
    b = dataset.arm_values(outcome, unblinded)
    if a.size == 0:
        raise EmptyArmError(blinded)
    if b.size == 0:
        raise EmptyArmError(unblinded)
    return float(a.mean() - b.mean())


def exclusion_list(protocol: PretrialProtocol, report: SubgroupReport) -> ExclusionList:
    """Units a registered screen removes from the main study."""
    if not protocol.registered:
        raise UnregisteredProtocolError(
            f"protocol {protocol.id!r} is not registered; exclusions must be fixed before the screen runs"
        )
    drop = {NONRESPONDER, NONCOMPLIER}
    units = tuple(u for u, c in report.per_unit_calls.items() if c in drop)
    return ExclusionList(protocol.id, protocol.digest(), units)
