from __future__ import annotations


class SvcError(RuntimeError):
    pass


# -----------------------------
# Tensor core
# -----------------------------
class ShapeError(SvcError, ValueError):
    pass


class UnknownPrimitiveError(SvcError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown primitive"


class NonScalarLossError(SvcError, ValueError):
    pass


class NonFiniteError(SvcError, FloatingPointError):
    pass


class NonFiniteGradientError(SvcError, FloatingPointError):
    def __init__(self, param_name: str) -> None:
        super().__init__(f"non-finite gradient for parameter {param_name!r}; step rejected")
        self.param_name = param_name


# -----------------------------
# Audio / corpus
# -----------------------------
class AudioError(SvcError, ValueError):
    pass


class CorpusError(SvcError):
    pass


class NoVoicedFramesError(SvcError, ValueError):
    def __init__(self, what: str = "signal") -> None:
        super().__init__(f"no voiced frames in {what}")


# -----------------------------
# Checkpoints
# -----------------------------
class CheckpointError(SvcError):
    pass


class BadMagicError(CheckpointError):
    def __init__(self, path: str, found: bytes) -> None:
        super().__init__(f"bad magic in {path}: {found!r}")
        self.path = path


class VersionMismatchError(CheckpointError):
    def __init__(self, path: str, found: int, expected: int) -> None:
        super().__init__(f"version mismatch in {path}: file v{found}, reader v{expected}")
        self.found = found
        self.expected = expected


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, path: str, where: str) -> None:
        super().__init__(f"truncated checkpoint {path}: ends inside {where}")
        self.where = where


# -----------------------------
# Models / pipeline
# -----------------------------
class LabelTooLongError(SvcError, ValueError):
    def __init__(self, n_frames: int, required: int) -> None:
        super().__init__(f"label needs at least {required} frames, got T={n_frames}")
        self.required = required


class ContractError(SvcError):
    """A stage precondition failed; `module` names the contract owner."""

    def __init__(self, module: str, message: str) -> None:
        super().__init__(f"[{module}] {message}")
        self.module = module


class ConfigError(SvcError, ValueError):
    pass
