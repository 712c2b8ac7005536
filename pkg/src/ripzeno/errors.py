class NumericalContractError(RuntimeError):
    """A numerical accuracy or invariant contract could not be met."""


class PropagationError(NumericalContractError):
    pass


class SpectrumError(NumericalContractError):
    pass


class TrajectoryError(NumericalContractError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
