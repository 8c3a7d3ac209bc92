"""Exception types shared across the package."""


class SchemeError(ValueError):
    """A factorization scheme violates its structural invariants."""


class CapacityError(ValueError):
    """An exact algorithm was asked to run past its instance-size guard."""


class CoverageError(ValueError):
    """A sample batch does not cover every required scope value."""


class ConfigError(ValueError):
    """An experiment or CLI configuration is invalid."""
