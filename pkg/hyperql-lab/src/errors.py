# src/errors.py


class LabError(Exception):
    """Base class for lab failures"""


class DimensionError(LabError, ValueError):
    pass


class ContractError(LabError, ValueError):
    pass


class EnvironmentDivergenceError(LabError, RuntimeError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"Environment diverged at step {step}")


class InstabilityError(LabError, RuntimeError):
    pass


class UnderfullBufferError(LabError, ValueError):
    pass


class DegenerateDesignError(LabError, ValueError):
    pass


class StationaryInstanceError(LabError, ValueError):
    pass


class DivergenceError(LabError, RuntimeError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"Training diverged at step {step}")


class ConfigError(LabError, ValueError):
    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class MissingInputError(LabError, FileNotFoundError):
    pass
