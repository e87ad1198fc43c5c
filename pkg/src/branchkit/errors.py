"""Exception types shared across the library."""


class BranchkitError(Exception):
    """Base class for library errors."""


class PopulationExceededCap(BranchkitError):
    """Raised when a simulation grows past its node cap.

    Carries the generation reached and the size that tripped the cap so
    callers can retry with a smaller horizon or a larger cap.
    """

    def __init__(self, generation: int, size: int, cap: int):
        self.generation = generation
        self.size = size
        self.cap = cap
        super().__init__(
            f"population reached {size} > cap {cap} at generation {generation}"
        )


class ExtinctEverywhere(BranchkitError):
    """All replicates of an experiment died before the target horizon."""


class EnumerationBudgetExceeded(BranchkitError):
    """An exact enumeration would require more states than the configured budget."""


class SupercriticalityUnmet(UserWarning):
    """A tube's one-step mean dropped to 1 or below at a late checkpoint, so the
    lower-bound construction certifies nothing there. The run still completes;
    the verdict is uncertified, not false."""


class ConfigError(BranchkitError):
    """Invalid run configuration; message lists one violation per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
