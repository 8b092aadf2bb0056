"""Simulate experiments with declared controls and check them against ground truth."""

__version__ = "0.1.0"

from .controls import ControlDeclaration, ControlKind, NcxLabel, classify_ncx, validate_control
from .diagnostics import DecisionRule, TestMethod, Verdict, diagnose, diagnostic_power, evaluate_decision_rules
from .errors import (
    DomainError,
    EmptyArmError,
    ExpControlsError,
    NoSignalError,
    ProtocolViolationError,
    ResourceLimitError,
    ScenarioError,
    UnknownIdError,
    UnregisteredProtocolError,
)
from .pretrial import PretrialProtocol, Purpose, decompose_effect, exclusion_list
from .scenario import Scenario, parse_scenario, serialize_scenario
from .science import (
    Assignment,
    ObservedDataset,
    OutcomeDef,
    OutcomeRole,
    ScienceTable,
    TreatmentKind,
    TreatmentLevel,
    Unit,
    average_effect,
    difference_in_means,
    unit_effect,
)
from .simulation import AssignmentMechanism, Experiment, FactorEffect, NoiseModel, simulate_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
