"""Exception types shared across the library and mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field. CLI exit code 2."""


class ArtifactMismatchError(RuntimeError):
    """Checkpoint or dataset does not match the current config. CLI exit code 3."""


class NumericalAbortError(RuntimeError):
    """Training hit a non-finite loss. CLI exit code 4."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:g}, grad_norm={grad_norm:g})"
        )


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned: too few frames for the label sequence."""


class OracleSizeError(ValueError):
    """Brute-force path enumeration would exceed the size cap."""


class AdapterConflictError(ValueError):
    """Adapter insertion targeted a slot that is already occupied."""


class PolicyError(ValueError):
    """Transfer policy is not applicable to the given model."""


class SequenceTooShortError(ValueError):
    """Input has too few frames to survive the frontend."""
