"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: schema/input problems exit
with 2, relevance/degeneracy with 3, numerical failures with 4.
"""


class IvrtError(Exception):
    """Base class for all package errors."""


class SchemaError(IvrtError):
    """Malformed input data or configuration (CLI exit code 2)."""


class InputError(SchemaError):
    """Invalid argument values (off-simplex weights, bad shapes)."""


class RelevanceError(IvrtError):
    """Weak, irrelevant, or wrongly signed instruments (CLI exit code 3)."""


class DegeneratePolicyError(RelevanceError):
    """Counterfactual policy induces no change in the propensity distribution."""


class NumericalError(IvrtError):
    """Singular matrices, failed factorizations, non-convergence (CLI exit code 4)."""


class InfeasibleError(NumericalError):
    """Constraint set of an optimization problem is empty."""


class CapacityError(InputError):
    """Problem size exceeds a hard cap (e.g. type enumeration beyond L=5)."""
