"""Exception hierarchy shared by every service and command group."""

from typing import Iterable, List, Optional


class AvsepError(Exception):
    """Base class for domain errors. The CLI maps these to exit code 1."""


class InvalidInput(AvsepError):
    """Input violates a documented precondition."""


class ShapeError(AvsepError):
    """Array shapes, lengths or counts do not match."""


class DegenerateSource(AvsepError):
    """A source has no energy where energy is required."""


class SynthesisError(AvsepError):
    """Overlap-add synthesis is not invertible at some sample."""


class ParseError(AvsepError):
    """A manifest, config or checkpoint could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class MissingAsset(AvsepError):
    """Referenced media files or directories do not exist."""

    def __init__(self, paths: Iterable[str]):
        self.paths: List[str] = list(paths)
        listing = '\n'.join(f"  - {p}" for p in self.paths)
        super().__init__(f"{len(self.paths)} missing asset(s):\n{listing}")


class DuplicateId(AvsepError):
    """Two manifest entries share a clip_id."""


class SamplingExhausted(AvsepError):
    """Tuple sampling failed after the retry bound."""


class IoError(AvsepError):
    """Writing an artifact to disk failed."""


class ConfigError(AvsepError):
    """Settings are unknown, inconsistent, or do not match the inputs."""


class NumericalError(AvsepError):
    """A loss term or parameter became non-finite."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value in '{term}': {value}")


class Diverged(AvsepError):
    """Training loss exceeded the divergence guard."""


class IncompatibleCheckpoint(AvsepError):
    """Checkpoint digest does not match its config or the requested config."""


class ClipTooShort(AvsepError):
    """Clip is shorter than one analysis window."""


class AlignmentError(AvsepError):
    """Audio and visual streams disagree in duration by more than one hop."""


class DegenerateReference(AvsepError):
    """A reference signal for BSS evaluation has zero energy."""


class SilentReference(AvsepError):
    """The clean signal given to STOI is entirely silent."""
