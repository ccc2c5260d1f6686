"""Error taxonomy shared across the package.

Two failure families matter to callers: bad input (malformed files, shape or
range violations, over-capacity labels) and numerical breakdown (non-finite
values produced where the math guarantees finite results).  The CLI maps the
first family to exit code 1 and the second to exit code 2.
"""


class InputError(ValueError):
    """Raised when user-supplied data violates a documented precondition."""


class CapacityError(InputError):
    """Raised when more same-class events overlap than the output has tracks."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values unexpectedly."""
