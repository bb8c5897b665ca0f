"""Exception types shared across the lab."""

from .diffcore import ContractError, NondeterminismError, NonFiniteError


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit status 2)."""


class TrainingError(RuntimeError):
    """A training or finetuning loop aborted (non-finite loss, divergence)."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history


__all__ = ["ConfigError", "ContractError", "NondeterminismError", "NonFiniteError", "TrainingError"]
