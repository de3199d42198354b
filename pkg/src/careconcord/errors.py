"""Exception types shared across the package."""


class InputError(Exception):
    """Malformed or missing user input (files, specs, event logs)."""


class SpecError(InputError):
    """Requirement specification violates a structural invariant."""


class SolverError(Exception):
    """Numerical solve failed or produced an unusable result."""
