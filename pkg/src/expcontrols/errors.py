"""Exception hierarchy shared by all modules."""


class ExpControlsError(Exception):
    """Base class; ``module`` records which stage raised it."""

    module = "expcontrols"


class UnknownIdError(ExpControlsError, LookupError):
    def __init__(self, kind: str, ident: str) -> None:
        super().__init__(f"unknown {kind} id: {ident!r}")
        self.kind = kind
        self.ident = ident


class DomainError(ExpControlsError, ValueError):
    pass


class EmptyArmError(DomainError):
    def __init__(self, treatment: str) -> None:
        super().__init__(f"no units assigned to treatment {treatment!r}")
        self.treatment = treatment


class ResourceLimitError(ExpControlsError):
    pass


class ProtocolViolationError(ExpControlsError):
    pass


class UnregisteredProtocolError(ProtocolViolationError):
    pass


class NoSignalError(ExpControlsError):
    pass


class ScenarioError(ExpControlsError):
    """Scenario validation failure; ``errors`` holds every problem found."""

    module = "cli"

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid scenario")
