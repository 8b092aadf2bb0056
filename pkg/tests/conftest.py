from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from expcontrols.science import (
    Assignment,
    ObservedDataset,
    OutcomeDef,
    OutcomeRole,
    ScienceTable,
    TreatmentKind,
    TreatmentLevel,
    Unit,
)

TREATMENTS = (
    TreatmentLevel("w_at", "active", TreatmentKind.ACTIVE),
    TreatmentLevel("w_ct", "control", TreatmentKind.CONTROL_TREATMENT),
    TreatmentLevel("w_nt", "null control", TreatmentKind.NULL_TREATMENT_CONTROL),
)
OUTCOMES = (
    OutcomeDef("p", "primary", role=OutcomeRole.PRIMARY),
    OutcomeDef("k", "secondary", role=OutcomeRole.SECONDARY),
)


def unit_ids(n: int) -> list[str]:
    return [f"u{i}" for i in range(n)]


def make_table(values, units=None, treatments=TREATMENTS, outcomes=OUTCOMES, factor_levels=None) -> ScienceTable:
    """Table from an ``(N, K, J)`` array with the default levels."""
    arr = np.asarray(values, dtype=float)
    n, k, j = arr.shape
    if units is None:
        units = [Unit(u) for u in unit_ids(n)]
    return ScienceTable(units, outcomes[:k], treatments[:j], arr, factor_levels)


def arm_dataset(values, treatment: str = "w_nt", outcome: str = "p", seed: int = 0) -> ObservedDataset:
    """Dataset where every unit sits in one arm with the given readings."""
    ids = unit_ids(len(values))
    return ObservedDataset(
        Assignment({u: treatment for u in ids}), ids, {outcome: np.asarray(values, dtype=float)}, seed=seed
    )


def two_arm_dataset(arms: dict[str, list[float]], outcome: str = "p", seed: int = 0) -> ObservedDataset:
    ids, w, vals = [], {}, []
    for arm, xs in arms.items():
        for x in xs:
            u = f"u{len(ids)}"
            ids.append(u)
            w[u] = arm
            vals.append(x)
    return ObservedDataset(Assignment(w), ids, {outcome: np.array(vals, dtype=float)}, seed=seed)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
small_int = st.integers(-5, 5)


@st.composite
def tables(draw, min_units=1, max_units=8, n_treatments=3, elements=finite):
    n = draw(st.integers(min_units, max_units))
    k = draw(st.integers(1, 2))
    vals = draw(st.lists(elements, min_size=n * k * n_treatments, max_size=n * k * n_treatments))
    return make_table(np.array(vals, dtype=float).reshape(n, k, n_treatments))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title = results[n]
        terminalreporter.write_line(f"{status} criterion {n:>2}: {title}")
