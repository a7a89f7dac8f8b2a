"""Exception hierarchy shared by every subsystem."""


class BaimError(Exception):
    """Base class for all package errors."""


class ConfigError(BaimError, ValueError):
    pass


class SpecError(ConfigError):
    pass


class RangeError(ConfigError, IndexError):
    pass


class IdError(ConfigError):
    pass


class DimensionError(BaimError, ValueError):
    pass


class DomainError(BaimError, ValueError):
    pass


class SampleCountError(DomainError):
    pass


class NumericError(BaimError, ArithmeticError):
    """A non-finite value appeared in a tensor."""


class StaleTapeError(BaimError, RuntimeError):
    pass


class NonDeterminismError(BaimError, RuntimeError):
    pass


class CycleError(BaimError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("projection graph has a cycle: " + " -> ".join(map(str, self.cycle)))


class FormatError(BaimError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class PhaseError(BaimError, RuntimeError):
    """Workflow phase executed out of order or failed."""

    def __init__(self, phase, message):
        self.phase = phase
        super().__init__(f"[{phase}] {message}")
