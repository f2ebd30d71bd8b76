"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class ProtocolError(RuntimeError):
    """An operation was called in a state that does not allow it."""


class ContractError(ValueError):
    """Shapes or parameter layouts do not match a declared contract."""


class CorruptCheckpointError(ValueError):
    """A checkpoint file is truncated or fails its integrity check."""


class DegenerateInputError(ValueError):
    """Input makes a loss undefined (e.g. a zero-norm embedding)."""


class FrozenParameterError(RuntimeError):
    """A frozen parameter was handed to an optimizer."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite."""


class WorkerError(RuntimeError):
    """A rollout worker failed; ``worker_id`` names which one."""

    def __init__(self, worker_id, cause):
        super().__init__(f"rollout worker {worker_id} failed: {cause!r}")
        self.worker_id = worker_id
        self.cause = cause
