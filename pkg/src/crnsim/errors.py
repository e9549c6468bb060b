"""Exception types shared across the simulator."""


class NumericalFailure(ArithmeticError):
    """A linear system could not be solved (singular or ill-posed)."""


class InvalidState(RuntimeError):
    """An operation was invoked on an object in the wrong lifecycle state."""
