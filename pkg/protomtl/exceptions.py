from typing import Dict, Optional

import msgspec


class ProtoMTLError(Exception):
    """Base exception for protomtl errors."""

    pass


class ValidationError(ProtoMTLError):
    """Raised when shapes, ranges or settings are invalid."""

    pass


class ConfigError(ValidationError):
    """Raised when a config or manifest file cannot be parsed."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class DataIOError(ProtoMTLError):
    """Raised when a sample cannot be written or read."""

    def __init__(self, path: str, message: str, sample_index: Optional[int] = None):
        self.path = path
        self.message = message
        self.sample_index = sample_index
        where = f"sample {sample_index} " if sample_index is not None else ""
        super().__init__(f"{where}({path}): {message}")


class CheckpointError(ProtoMTLError):
    """Base exception for checkpoint persistence failures."""

    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint has an unknown format version."""

    def __init__(self, version: int):
        self.version = version
        super().__init__(f"Unsupported checkpoint format version {version}")


class CheckpointIntegrityError(CheckpointError):
    """Raised when a checkpoint is truncated or corrupt."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        self.message = message
        super().__init__(f"Corrupt checkpoint at byte {offset}: {message}")


class DivergenceSnapshot(msgspec.Struct, kw_only=True, frozen=True):
    """State captured when training produces a non-finite loss.

    Attributes
    ----------
    step : int
        Global optimizer step at which the loss diverged
    components : dict[str, float]
        Value of every loss component at that step
    max_abs_grad : float
        Largest absolute gradient entry over all parameters
    """

    step: int
    components: Dict[str, float]
    max_abs_grad: float


class TrainingDivergedError(ProtoMTLError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, snapshot: DivergenceSnapshot):
        self.snapshot = snapshot
        parts = ", ".join(f"{k}={v:.6g}" for k, v in snapshot.components.items())
        super().__init__(
            f"Non-finite loss at step {snapshot.step} ({parts}); "
            f"max |grad| = {snapshot.max_abs_grad:.6g}"
        )


class GradientCheckError(ProtoMTLError):
    """Raised when an analytic gradient disagrees with finite differences."""

    def __init__(self, name: str, rel_error: float, tolerance: float):
        self.name = name
        self.rel_error = rel_error
        self.tolerance = tolerance
        super().__init__(
            f"Gradient check '{name}' failed: rel. error {rel_error:.3e} "
            f">= {tolerance:.1e}"
        )
