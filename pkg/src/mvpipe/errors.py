"""Exception hierarchy shared by all pipeline modules.

Each class carries an ``exit_code`` so the CLI can map failures onto its
documented exit codes without a lookup table.
"""

from __future__ import annotations


class PipelineError(Exception):
    exit_code = 2


class ConfigError(PipelineError, ValueError):
    pass


class ManifestError(PipelineError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ResizeInfeasible(PipelineError, ValueError):
    """No acceptable grid rectangle for this image under the pixel window.

    ``nearest_window`` is the smallest widening of ``(min_pixels, max_pixels)``
    that would accept the candidate, or ``None`` when the failure is an
    aspect-ratio violation that no window change can fix.
    """

    def __init__(self, message: str, candidate: tuple[int, int], nearest_window: tuple[int, int] | None):
        self.candidate = candidate
        self.nearest_window = nearest_window
        super().__init__(message)


class PackingError(PipelineError, ValueError):
    pass


class OversizedSample(PackingError):
    def __init__(self, dataset_id: str, sample_index: int, total_tokens: int, reason: str):
        self.dataset_id = dataset_id
        self.sample_index = sample_index
        self.total_tokens = total_tokens
        super().__init__(f"sample ({dataset_id!r}, {sample_index}) with {total_tokens} tokens: {reason}")


class ZeroLengthSample(PackingError):
    def __init__(self, dataset_id: str, sample_index: int):
        self.dataset_id = dataset_id
        self.sample_index = sample_index
        super().__init__(f"sample ({dataset_id!r}, {sample_index}) has zero tokens")


class ShardError(PipelineError, ValueError):
    pass


class StateError(PipelineError):
    pass


class CorruptState(StateError):
    pass


class StateMismatch(StateError):
    exit_code = 4


class ContainerFormatError(PipelineError, ValueError):
    pass


class MergeError(PipelineError, ValueError):
    pass


class SearchError(PipelineError):
    pass
