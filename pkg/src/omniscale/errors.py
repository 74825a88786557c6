"""Exception types shared across modules.

Invalid arguments use the built-in :class:`ValueError`.
"""


class InvalidStateError(RuntimeError):
    """An operation ran without the parameters or setup it needs."""


class CorruptCheckpointError(ValueError):
    """Manifest and weights disagree, or either is unreadable."""


class TrainingDivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
