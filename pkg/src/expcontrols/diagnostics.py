"""Null treatment-control diagnostics and decision rules.

All statistics look at the primary outcome inside the null treatment-control
arm, where the latent outcome should be null for every unit:

* mean of the observed values,
* mean of their absolute values,
* ``N_A``, the number of units whose absolute value exceeds a threshold ``A``.

A decision rule turns one of these into a verdict on the whole experiment.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import rng
from .errors import DomainError, EmptyArmError
from .science import ObservedDataset, difference_in_means
from .simulation import Experiment, FactorEffect, NoiseModel

SIGN_FLIP_CAP = 2**16
TWO_SAMPLE_CAP = 10**5
MC_DRAWS = 10_000


class TestMethod(str, Enum):
    __test__ = False

    T_ONE_SAMPLE = "t_one_sample"
    SIGN_PERMUTATION = "sign_permutation"


class RuleKind(str, Enum):
    STRICT_COUNT = "strict_count"
    FRACTION_COUNT = "fraction_count"
    MEAN_TEST = "mean_test"


class Verdict(str, Enum):
    PASS = "pass"
    REJECT = "reject_experiment"


@dataclass(frozen=True)
class DecisionRule:
    kind: RuleKind
    threshold_A: float | None = None
    fraction: float | None = None
    alpha: float | None = None
    method: TestMethod | None = None
    id: str = ""

    def __post_init__(self) -> None:
        kind = RuleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is RuleKind.MEAN_TEST:
            if self.threshold_A is not None or self.fraction is not None:
                raise DomainError("mean_test takes alpha (and method), not threshold_A/fraction")
            if self.alpha is None or not 0 < self.alpha < 1:
                raise DomainError("mean_test requires alpha in (0, 1)")
            object.__setattr__(self, "method", TestMethod(self.method or TestMethod.SIGN_PERMUTATION))
        else:
            if self.alpha is not None or self.method is not None:
                raise DomainError(f"{kind.value} takes threshold_A, not alpha/method")
            if self.threshold_A is None or not self.threshold_A > 0:
                raise DomainError(f"{kind.value} requires threshold_A > 0")
            if kind is RuleKind.FRACTION_COUNT:
                frac = 0.10 if self.fraction is None else self.fraction
                if not 0 < frac <= 1:
                    raise DomainError("fraction must lie in (0, 1]")
                object.__setattr__(self, "fraction", frac)
            elif self.fraction is not None:
                raise DomainError("strict_count does not take a fraction")
        if not self.id:
            object.__setattr__(self, "id", kind.value)

    @classmethod
    def strict(cls, A: float, id: str = "") -> "DecisionRule":
        return cls(RuleKind.STRICT_COUNT, threshold_A=A, id=id)

    @classmethod
    def fraction_rule(cls, A: float, fraction: float = 0.10, id: str = "") -> "DecisionRule":
        return cls(RuleKind.FRACTION_COUNT, threshold_A=A, fraction=fraction, id=id)

    @classmethod
    def mean_test(cls, alpha: float, method: TestMethod | str = TestMethod.SIGN_PERMUTATION, id: str = "") -> "DecisionRule":
        return cls(RuleKind.MEAN_TEST, alpha=alpha, method=TestMethod(method), id=id)


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    p_value: float
    method: str
    exact: bool = True
    degenerate_variance: bool = False

    def to_dict(self) -> dict:
        return {
            "statistic": _num(self.statistic),
            "p_value": self.p_value,
            "method": self.method,
            "exact": self.exact,
            "degenerate_variance": self.degenerate_variance,
        }


@dataclass(frozen=True)
class RuleOutcome:
    verdict: Verdict
    statistic: float
    limit: float
    p_value: float | None = None

    def to_dict(self) -> dict:
        d = {"verdict": self.verdict.value, "statistic": _num(self.statistic), "limit": self.limit}
        if self.p_value is not None:
            d["p_value"] = self.p_value
        return d


@dataclass(frozen=True)
class ConfoundingFinding:
    overall_mean_flagged: bool
    overall_test: TestResult
    arm_difference: float | None = None
    arm_difference_p: float | None = None

    def to_dict(self) -> dict:
        return {
            "overall_mean_flagged": self.overall_mean_flagged,
            "overall_test": self.overall_test.to_dict(),
            "arm_difference": self.arm_difference,
            "arm_difference_p": self.arm_difference_p,
        }


@dataclass(frozen=True)
class DiagnosticReport:
    arm_size: int
    stat_mean: float
    stat_abs_mean: float
    stat_threshold_count: dict[float, int]
    test: TestResult
    verdicts: dict[str, RuleOutcome] = field(default_factory=dict)
    confounding: ConfoundingFinding | None = None

    @property
    def rejected(self) -> bool:
        return any(v.verdict is Verdict.REJECT for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "arm_size": self.arm_size,
            "stat_mean": self.stat_mean,
            "stat_abs_mean": self.stat_abs_mean,
            "stat_threshold_count": {repr(float(a)): n for a, n in self.stat_threshold_count.items()},
            "test": self.test.to_dict(),
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "confounding": self.confounding.to_dict() if self.confounding else None,
        }


def _num(x: float):
    # JSON has no infinities
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _arm(dataset: ObservedDataset, outcome: str, treatment: str) -> np.ndarray:
    vals = dataset.arm_values(outcome, treatment)
    if vals.size == 0:
        raise EmptyArmError(treatment)
    return vals


# -- statistics ---------------------------------------------------------------


def mean_null_tc(dataset: ObservedDataset, primary_outcome: str, null_tc: str) -> float:
    return float(np.mean(_arm(dataset, primary_outcome, null_tc)))


def abs_mean_null_tc(dataset: ObservedDataset, primary_outcome: str, null_tc: str) -> float:
    return float(np.mean(np.abs(_arm(dataset, primary_outcome, null_tc))))


def count_exceeding(values: np.ndarray, A: float) -> int:
    if not A > 0:
        raise DomainError("threshold A must be > 0")
    return int(np.count_nonzero(np.abs(values) > A))


def threshold_count(dataset: ObservedDataset, primary_outcome: str, null_tc: str, A: float) -> int:
    """``N_A``: arm units with ``|Y_obs| > A`` (strict)."""
    if not A > 0:
        raise DomainError("threshold A must be > 0")
    return count_exceeding(dataset.arm_values(primary_outcome, null_tc), A)


# -- tests ----------------------------------------------------------------------


def t_test_zero(values: np.ndarray) -> TestResult:
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 2:
        raise DomainError("the one-sample t test needs at least 2 observations")
    m = float(np.mean(x))
    s = float(np.std(x, ddof=1))
    if s == 0.0:
        if m == 0.0:
            return TestResult(0.0, 1.0, TestMethod.T_ONE_SAMPLE.value)
        return TestResult(math.copysign(math.inf, m), 0.0, TestMethod.T_ONE_SAMPLE.value,
                          degenerate_variance=True)
    t = m / (s / math.sqrt(n))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 1)))
    return TestResult(t, p, TestMethod.T_ONE_SAMPLE.value)


def _ge_with_tol(null_stats: np.ndarray, observed: float, scale: float) -> np.ndarray:
    # ties up to rounding count as "at least as extreme"
    return null_stats >= observed - 1e-12 * max(scale, 1e-300)


def sign_flip_test(
    values: np.ndarray,
    cap: int = SIGN_FLIP_CAP,
    draws: int = MC_DRAWS,
    seed: int = 0,
    stream: tuple = (),
) -> TestResult:
    """Two-sided sign-flip test of a zero mean, statistic ``|mean|``.

    Exact over all ``2**n`` flips when that is at most ``cap``; otherwise
    ``draws`` random flips from the keyed substream ``(seed, "sign_flip", *stream)``.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 1:
        raise DomainError("the sign-flip test needs at least 1 observation")
    observed = abs(float(np.mean(x)))
    scale = float(np.mean(np.abs(x)))
    if 2**n <= cap:
        codes = np.arange(2**n, dtype=np.int64)[:, None]
        signs = 1.0 - 2.0 * ((codes >> np.arange(n)) & 1)
        null = np.abs(signs @ x) / n
        hits = int(np.count_nonzero(_ge_with_tol(null, observed, scale)))
        return TestResult(observed, hits / 2**n, TestMethod.SIGN_PERMUTATION.value)
    key = rng.stream_keys(seed, [("sign_flip", *stream)])[0]
    u = rng.uniforms(np.full(draws * n, key), np.arange(draws * n, dtype=np.uint64))
    signs = np.where(u.reshape(draws, n) < 0.5, -1.0, 1.0)
    null = np.abs(signs @ x) / n
    hits = int(np.count_nonzero(_ge_with_tol(null, observed, scale)))
    return TestResult(observed, (hits + 1) / (draws + 1), TestMethod.SIGN_PERMUTATION.value, exact=False)


def test_mean_zero(
    dataset: ObservedDataset,
    primary_outcome: str,
    null_tc: str,
    method: TestMethod | str = TestMethod.SIGN_PERMUTATION,
    cap: int = SIGN_FLIP_CAP,
    draws: int = MC_DRAWS,
) -> TestResult:
    vals = _arm(dataset, primary_outcome, null_tc)
    return _test_values(vals, TestMethod(method), dataset.seed, (primary_outcome, null_tc), cap, draws)


# pytest must not collect the function above as a test
test_mean_zero.__test__ = False


def _test_values(vals, method, seed, stream, cap=SIGN_FLIP_CAP, draws=MC_DRAWS) -> TestResult:
    if method is TestMethod.T_ONE_SAMPLE:
        return t_test_zero(vals)
    return sign_flip_test(vals, cap, draws, seed, stream)


def two_sample_permutation_p(
    a: np.ndarray, b: np.ndarray, cap: int = TWO_SAMPLE_CAP, draws: int = MC_DRAWS,
    seed: int = 0, stream: tuple = (),
) -> tuple[float, bool]:
    """Two-sided p-value for ``|mean(a) - mean(b)|`` over re-splits of the pooled units."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pooled = np.concatenate([a, b])
    n, na = pooled.size, a.size
    total = pooled.sum()
    observed = abs(a.mean() - b.mean())
    scale = float(np.mean(np.abs(pooled))) or 1.0

    def diffs(sum_a):
        return np.abs(sum_a / na - (total - sum_a) / (n - na))

    if math.comb(n, na) <= cap:
        idx = np.array(list(itertools.combinations(range(n), na)), dtype=np.int64)
        null = diffs(pooled[idx].sum(axis=1))
        return int(np.count_nonzero(_ge_with_tol(null, observed, scale))) / len(idx), True
    key = rng.stream_keys(seed, [("two_sample", *stream)])[0]
    u = rng.uniforms(np.full(draws * n, key), np.arange(draws * n, dtype=np.uint64)).reshape(draws, n)
    perm = np.argsort(u, axis=1)[:, :na]
    null = diffs(pooled[perm].sum(axis=1))
    hits = int(np.count_nonzero(_ge_with_tol(null, observed, scale)))
    return (hits + 1) / (draws + 1), False


def adjust_multiplicity(p_values: Sequence[float], method: str = "none") -> list[float]:
    ps = [float(p) for p in p_values]
    if any(not 0 <= p <= 1 for p in ps):
        raise DomainError("p-values must lie in [0, 1]")
    if method == "none":
        return ps
    if method == "bonferroni":
        m = len(ps)
        return [min(1.0, m * p) for p in ps]
    raise DomainError(f"unknown multiplicity method {method!r}")


# -- decision rules ---------------------------------------------------------------


def evaluate_decision_rules(
    dataset: ObservedDataset,
    rules: Sequence[DecisionRule],
    primary_outcome: str,
    null_tc: str,
    multiplicity: str = "none",
) -> dict[str, RuleOutcome]:
    """Verdict per rule id.

    ``fraction_count`` rejects once ``N_A >= ceil(fraction * N_arm)``, i.e. it
    passes exactly when ``N_A < fraction * N_arm``.
    """
    vals = _arm(dataset, primary_outcome, null_tc)
    n = vals.size
    out: dict[str, RuleOutcome] = {}
    tests = [r for r in rules if r.kind is RuleKind.MEAN_TEST]
    results = {
        r.id: _test_values(vals, r.method, dataset.seed, (primary_outcome, null_tc)) for r in tests
    }
    adjusted = dict(zip(results, adjust_multiplicity([t.p_value for t in results.values()], multiplicity)))
    for rule in rules:
        if rule.kind is RuleKind.MEAN_TEST:
            p = adjusted[rule.id]
            verdict = Verdict.REJECT if p < rule.alpha else Verdict.PASS
            out[rule.id] = RuleOutcome(verdict, results[rule.id].statistic, rule.alpha, p)
            continue
        n_a = count_exceeding(vals, rule.threshold_A)
        if rule.kind is RuleKind.STRICT_COUNT:
            limit = 1
        else:
            # nudge guards fraction*n landing a hair above an integer
            limit = max(1, math.ceil(rule.fraction * n - 1e-9))
        out[rule.id] = RuleOutcome(Verdict.REJECT if n_a >= limit else Verdict.PASS, n_a, limit)
    return out


# -- confounding ------------------------------------------------------------------


def diagnose_confounding(
    dataset: ObservedDataset,
    primary_outcome: str,
    null_tc: str,
    active: str,
    control: str,
    alpha: float,
    method: TestMethod | str = TestMethod.SIGN_PERMUTATION,
) -> ConfoundingFinding:
    """Two-stage check for an unintended factor tied to assignment.

    Stage 1 tests whether the primary outcome, pooled over every unit in the
    experiment (null-control arm included), is centred on zero. Only if that
    flags does stage 2 compare the active and control arms.
    """
    for arm in (null_tc, active, control):
        _arm(dataset, primary_outcome, arm)
    pooled = dataset.outcome_values(primary_outcome)
    overall = _test_values(pooled, TestMethod(method), dataset.seed, (primary_outcome, "pooled"))
    if overall.p_value >= alpha:
        return ConfoundingFinding(False, overall)
    diff = difference_in_means(dataset, primary_outcome, active, control)
    p, _ = two_sample_permutation_p(
        dataset.arm_values(primary_outcome, active),
        dataset.arm_values(primary_outcome, control),
        seed=dataset.seed,
        stream=(primary_outcome, active, control),
    )
    return ConfoundingFinding(True, overall, diff, p)


def diagnose(
    dataset: ObservedDataset,
    primary_outcome: str,
    null_tc: str,
    rules: Sequence[DecisionRule] = (),
    method: TestMethod | str = TestMethod.SIGN_PERMUTATION,
    thresholds: Sequence[float] = (),
    confounding: tuple[str, str, float] | None = None,
    multiplicity: str = "none",
) -> DiagnosticReport:
    """All null treatment-control statistics, tests and verdicts for one dataset.

    ``confounding=(active, control, alpha)`` also runs :func:`diagnose_confounding`.
    """
    vals = _arm(dataset, primary_outcome, null_tc)
    As = list(dict.fromkeys([*thresholds, *(r.threshold_A for r in rules if r.threshold_A)]))
    finding = None
    if confounding is not None:
        active, control, alpha = confounding
        finding = diagnose_confounding(dataset, primary_outcome, null_tc, active, control, alpha, method)
    return DiagnosticReport(
        arm_size=int(vals.size),
        stat_mean=float(np.mean(vals)),
        stat_abs_mean=float(np.mean(np.abs(vals))),
        stat_threshold_count={float(a): count_exceeding(vals, a) for a in As},
        test=test_mean_zero(dataset, primary_outcome, null_tc, method),
        verdicts=evaluate_decision_rules(dataset, rules, primary_outcome, null_tc, multiplicity),
        confounding=finding,
    )


# -- power --------------------------------------------------------------------------


def replication_seeds(seed: int, replications: int) -> list[int]:
    """Per-replication seeds; shared across designs to give common random numbers."""
    return [rng.derive_seed(seed, "replication", r) for r in range(replications)]


def flawed(experiment: Experiment, flaw: FactorEffect | NoiseModel | None) -> Experiment:
    if flaw is None:
        return experiment
    if isinstance(flaw, FactorEffect):
        return experiment.with_(effects=experiment.effects + (flaw,))
    if isinstance(flaw, NoiseModel):
        return experiment.with_(noise=flaw)
    raise DomainError(f"unsupported flaw type {type(flaw).__name__}")


def rejection_indicators(
    experiment: Experiment,
    rule: DecisionRule,
    null_tc: str,
    replications: int,
    seed: int,
    primary_outcome: str | None = None,
    batch: int = 2000,
) -> np.ndarray:
    """Boolean per replication: did ``rule`` reject the simulated experiment?"""
    if replications < 1:
        raise DomainError("replications must be >= 1")
    outcome = primary_outcome or experiment.table.primary_outcome
    seeds = replication_seeds(seed, replications)
    out = np.empty(replications, dtype=bool)
    for start in range(0, replications, batch):
        chunk = seeds[start:start + batch]
        for j, ds in enumerate(experiment.replicate(chunk)):
            verdict = evaluate_decision_rules(ds, [rule], outcome, null_tc)[rule.id].verdict
            out[start + j] = verdict is Verdict.REJECT
    return out


def diagnostic_power(
    experiment: Experiment,
    rule: DecisionRule,
    null_tc: str,
    flaw: FactorEffect | NoiseModel | None = None,
    replications: int = 1000,
    seed: int = 0,
    primary_outcome: str | None = None,
) -> float:
    """Fraction of simulated replications in which ``rule`` rejects the flawed design."""
    hits = rejection_indicators(flawed(experiment, flaw), rule, null_tc, replications, seed, primary_outcome)
    return float(hits.mean())


def monte_carlo_se(p: float, replications: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / replications)
