"""Exception hierarchy shared by every stage of the removal pipeline."""


class ReormError(Exception):
    """Base class for all errors raised by this package."""


class RasterError(ReormError):
    """Invalid image or mask data."""


class DimensionMismatchError(RasterError):
    """Raster dimensions disagree."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class UnsupportedImageError(RasterError):
    """Image format outside 8-bit RGB (or {0,255} single-channel for masks)."""


class PromptInputError(ReormError):
    """Prompt rendering received empty or invalid input."""


class PromptAssetError(ReormError):
    """A prompt asset is missing or does not match its pinned checksum."""


class MalformedResponse(ReormError):
    """A reasoner response lacks the markers or list the parser needs."""

    def __init__(self, message: str, text: str = ""):
        super().__init__(message)
        self.text = text


class BackendError(ReormError):
    """A model backend could not serve a request."""


class TransportError(BackendError):
    """Network failure, timeout or non-success HTTP status."""


class RateLimitError(TransportError):
    """Endpoint kept answering 429 after all retries."""


class MissingFixture(BackendError):
    """Replay mode has no recorded response for a request."""

    def __init__(self, kind: str, key: str):
        super().__init__(f"No recorded {kind} response for request {key[:12]}")
        self.kind = kind
        self.key = key


class ProviderUnavailable(BackendError):
    """An optional metric provider is not configured or not reachable."""


class AnalysisFailed(ReormError):
    """Analysis produced no parseable removal plan after all retries."""

    def __init__(self, message: str, attempts: int, last_response: str = ""):
        super().__init__(message)
        self.attempts = attempts
        self.last_response = last_response


class NoMaskFound(ReormError):
    """The segmenter found no usable instance for any plan label."""

    def __init__(self, labels: list[str]):
        super().__init__(f"No mask above threshold for any of {labels}")
        self.labels = list(labels)


class StageError(ReormError):
    """Pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class SceneError(ReormError):
    """Invalid scene graph or reference to an unknown object id."""


class ManifestError(ReormError):
    """Benchmark manifest line failed validation."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class MetricError(ReormError):
    """Metric preconditions violated."""


class DiversityError(ReormError):
    """Embedding analysis preconditions violated."""


class ConfigError(ReormError):
    """Invalid run configuration or environment."""
