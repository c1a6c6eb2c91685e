"""Exception hierarchy shared by the compiler, simulator and numeric executor."""


class HpmoeError(Exception):
    """Base class for all package errors."""


class ConfigError(HpmoeError, ValueError):
    pass


class DanglingReference(HpmoeError):
    pass


class CyclicGraph(HpmoeError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = list(witness or [])


class GraphValidationError(HpmoeError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class SplitPolicyError(HpmoeError):
    pass


class StaleResultError(HpmoeError):
    pass


class PropagationMissing(HpmoeError):
    pass


class SliceError(HpmoeError):
    pass


class UncoveredRegion(HpmoeError):
    pass


class ParseError(HpmoeError):
    def __init__(self, message, location=None):
        loc = f" at {location}" if location is not None else ""
        super().__init__(f"{message}{loc}")
        self.location = location


class VersionError(HpmoeError):
    pass


class DeadlockError(HpmoeError):
    def __init__(self, message, blocked=None):
        super().__init__(message)
        self.blocked = list(blocked or [])


class ShapeError(HpmoeError, ValueError):
    pass


class RoutingError(HpmoeError, ValueError):
    pass


class VerificationError(HpmoeError):
    pass
