from pathlib import Path
from typing import Any, Optional, Union

__all__ = [
    "CodebookError",
    "ConfigError",
    "DataError",
    "EmptySurfaceError",
    "FormatError",
    "InconsistentStateError",
    "MissingArtifactError",
    "NonFiniteError",
    "PartDiffError",
    "ScheduleError",
    "ShapeError",
    "SpecError",
    "TrainingDivergedError",
    "UnresolvedMaskError",
]

PathLike = Union[str, Path]


class PartDiffError(Exception):
    """Base class of every exception raised by partdiff"""


class ConfigError(PartDiffError):
    """Bad configuration value, unknown config key or bad command line usage"""


class DataError(PartDiffError):
    """Problem with data read from or written to disk"""


class FormatError(DataError):
    """A file does not start with the expected magic or is cut short"""

    def __init__(
        self,
        *args: Any,
        path: Optional[PathLike] = None,
        expected: Optional[bytes] = None,
    ) -> None:
        super().__init__(*args)
        self.path: Optional[PathLike] = path
        self.expected: Optional[bytes] = expected

    @classmethod
    def BadMagic(cls, path: PathLike, expected: bytes, found: bytes) -> "FormatError":
        return cls(
            f"{path}: expected magic {expected!r} but found {found!r}",
            path=path,
            expected=expected,
        )

    @classmethod
    def Truncated(cls, path: PathLike, expected: bytes) -> "FormatError":
        return cls(f"{path}: file is truncated", path=path, expected=expected)


class MissingArtifactError(DataError):
    """A prerequisite artifact does not exist yet"""

    def __init__(
        self, *args: Any, path: Optional[PathLike] = None, command: str = ""
    ) -> None:
        super().__init__(*args)
        self.path: Optional[PathLike] = path
        self.command: str = command

    @classmethod
    def For(cls, path: PathLike, command: str) -> "MissingArtifactError":
        return cls(
            f"{path} does not exist, run `partdiff {command}` first",
            path=path,
            command=command,
        )


class EmptySurfaceError(DataError):
    """The grid has no zero crossing to sample surface points from"""


class UnresolvedMaskError(DataError):
    """A token map still holds the [MASK] index where real tokens are required"""


class ShapeError(PartDiffError, ValueError):
    """Operands have incompatible shapes"""


class SpecError(PartDiffError, ValueError):
    """A shape spec leaves the unit cube or carries an invalid label"""


class ScheduleError(PartDiffError, ValueError):
    """A diffusion schedule would contain negative probabilities"""


class InconsistentStateError(PartDiffError):
    """The state s_t cannot be reached from the given s_0 under the chain"""


class CodebookError(PartDiffError, ValueError):
    """Invalid codebook or not enough distinct latents to fit one"""


class NonFiniteError(PartDiffError, ValueError):
    """Non-finite values where finite values are required"""


class TrainingDivergedError(PartDiffError):
    """Training produced a non-finite loss"""

    def __init__(
        self, *args: Any, step: int = -1, last_finite_loss: Optional[float] = None
    ) -> None:
        super().__init__(*args)
        self.step: int = step
        self.last_finite_loss: Optional[float] = last_finite_loss

    @classmethod
    def AtStep(
        cls, step: int, loss: float, last_finite_loss: Optional[float]
    ) -> "TrainingDivergedError":
        return cls(
            f"loss became {loss} at step {step} (last finite loss {last_finite_loss})",
            step=step,
            last_finite_loss=last_finite_loss,
        )
