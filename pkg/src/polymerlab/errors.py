"""Exception types shared across the package.

The CLI maps these onto exit codes, so new failure modes should reuse one of
the classes below rather than raising bare ValueErrors for contract-level
problems.
"""


class CapacityError(RuntimeError):
    """A hard size guard was exceeded (path count, state space, box range)."""


class IdentityError(RuntimeError):
    """An exact algebraic identity failed beyond tolerance.

    This always indicates a bug (indexing, scale handling), never statistics.
    """


class UnsupportedLawError(ValueError):
    """The operation needs a property the disorder law does not have."""


class GridInfeasibleError(ValueError):
    """The site grid cannot be built at this n."""

    def __init__(self, msg: str, minimal_n: int | None = None):
        super().__init__(msg)
        self.minimal_n = minimal_n


class NoTransitionError(ValueError):
    """The L2-critical equation has no root for this law/dimension."""


class ConfigError(ValueError):
    """An experiment configuration failed schema validation."""
