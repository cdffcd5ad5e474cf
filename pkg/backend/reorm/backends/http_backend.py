"""httpx clients for the chat, segmentation, removal and metric endpoints."""

import logging
import threading
import time
from collections.abc import Callable
from typing import Any

import httpx
import numpy as np
from pydantic import BaseModel, ValidationError

from reorm.backends.base import (
    BackendSet,
    Embedder,
    PairScorer,
    Reasoner,
    Remover,
    Segmenter,
    SegmentResult,
    require_image_bundle,
    require_text_bundle,
)
from reorm.backends.wire import (
    ChatResponse,
    EmbedRequest,
    EmbedResponse,
    RemoveRequest,
    RemoveResponse,
    ScorePairRequest,
    ScorePairResponse,
    SegmentRequest,
    SegmentResponse,
    build_chat_request,
    segment_result_from_wire,
)
from reorm.config import Locality, Settings, get_settings
from reorm.errors import BackendError, ConfigError, RasterError, RateLimitError, TransportError
from reorm.metrics import backend_calls, backend_retries
from reorm.raster import Image, Mask, fit_longest_side, image_from_b64, image_to_b64, mask_to_b64
from reorm.schemas import PromptBundle

logger = logging.getLogger(__name__)

CHAT_PATH = "/v1/chat/completions"
RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def build_client(settings: Settings, max_parallel: int = 4) -> httpx.Client:
    """httpx client with the configured timeout and user agent."""
    return httpx.Client(
        timeout=httpx.Timeout(settings.HTTP_TIMEOUT, connect=10.0),
        headers={"User-Agent": settings.USER_AGENT},
        limits=httpx.Limits(max_connections=max(max_parallel * 2, 10)),
    )


class HttpEndpoint:
    """One JSON-over-HTTP endpoint with retries and bounded in-flight requests.

    The request body is serialized once, before the retry loop, so every
    attempt sends identical bytes.
    """

    def __init__(
        self,
        base_url: str,
        kind: str,
        *,
        settings: Settings | None = None,
        client: httpx.Client | None = None,
        max_parallel: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.settings = settings or get_settings()
        self.base_url = base_url.rstrip("/")
        self.kind = kind
        self._client = client or build_client(self.settings, max_parallel)
        self._slots = threading.BoundedSemaphore(max_parallel)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.settings.REORM_API_KEY:
            headers["Authorization"] = f"Bearer {self.settings.REORM_API_KEY}"
        return headers

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None:
            retry_after = response.headers.get("Retry-After")
            if retry_after:
                try:
                    return min(float(retry_after), 60.0)
                except ValueError:
                    pass
        return self.settings.RETRY_BACKOFF_BASE * (2**attempt)

    def post(self, path: str, payload: BaseModel) -> dict[str, Any]:
        """POST ``payload`` and return the decoded JSON body."""
        url = f"{self.base_url}{path}"
        content = payload.model_dump_json().encode("utf-8")
        last_error: TransportError | None = None

        with self._slots:
            for attempt in range(self.settings.MAX_RETRIES + 1):
                response = None
                try:
                    response = self._client.post(url, content=content, headers=self._headers())
                except httpx.TimeoutException as e:
                    last_error = TransportError(f"{self.kind} request to {url} timed out: {e}")
                except httpx.HTTPError as e:
                    last_error = TransportError(f"{self.kind} request to {url} failed: {e}")
                else:
                    if response.status_code < 400:
                        try:
                            body = response.json()
                        except ValueError as e:
                            backend_calls.labels(kind=self.kind, outcome="error").inc()
                            raise TransportError(f"{self.kind} endpoint returned invalid JSON") from e
                        backend_calls.labels(kind=self.kind, outcome="success").inc()
                        return body
                    if response.status_code == 429:
                        last_error = RateLimitError(f"{self.kind} endpoint rate limited (429)")
                    elif response.status_code in RETRYABLE_STATUS:
                        last_error = TransportError(f"{self.kind} endpoint returned {response.status_code}")
                    else:
                        backend_calls.labels(kind=self.kind, outcome="error").inc()
                        raise TransportError(
                            f"{self.kind} endpoint returned {response.status_code}: {response.text[:200]}"
                        )

                if attempt < self.settings.MAX_RETRIES:
                    delay = self._delay(attempt, response)
                    backend_retries.labels(kind=self.kind).inc()
                    logger.warning(
                        "Retrying backend request",
                        extra={"kind": self.kind, "attempt": attempt + 1, "delay": delay, "error": str(last_error)},
                    )
                    self._sleep(delay)

        backend_calls.labels(kind=self.kind, outcome="error").inc()
        assert last_error is not None
        raise last_error


def _parse(model: type[BaseModel], body: dict[str, Any], kind: str):
    try:
        return model.model_validate(body)
    except ValidationError as e:
        raise TransportError(f"{kind} endpoint returned an unexpected body: {e}") from e


class HttpReasoner(Reasoner):
    """Chat-completions client; images are downscaled before upload."""

    def __init__(self, endpoint: HttpEndpoint, model: str, locality: Locality = "remote"):
        self.endpoint = endpoint
        self.model = model
        self.locality = locality

    def _complete(self, bundle: PromptBundle, image: Image | None) -> str:
        request = build_chat_request(self.model, bundle.system_text, bundle.user_text, image)
        body = self.endpoint.post(CHAT_PATH, request)
        return _parse(ChatResponse, body, self.endpoint.kind).text

    def vision_reason(self, bundle: PromptBundle, image: Image) -> str:
        """Completion with the image downscaled to REASONER_MAX_SIDE."""
        require_image_bundle(bundle)
        return self._complete(bundle, fit_longest_side(image, self.endpoint.settings.REASONER_MAX_SIDE))

    def text_reason(self, bundle: PromptBundle) -> str:
        """Text-only completion."""
        require_text_bundle(bundle)
        return self._complete(bundle, None)


class HttpSegmenter(Segmenter):
    """Open-vocabulary segmenter client."""

    def __init__(self, endpoint: HttpEndpoint, locality: Locality = "local"):
        self.endpoint = endpoint
        self.locality = locality

    def segment(self, image: Image, labels: list[str]) -> SegmentResult:
        """POST /segment."""
        body = self.endpoint.post("/segment", SegmentRequest(image_b64=image_to_b64(image), labels=labels))
        try:
            result = segment_result_from_wire(_parse(SegmentResponse, body, "segmenter"))
        except RasterError as e:
            raise BackendError(f"Segmenter returned an undecodable mask: {e}") from e
        return result.validate(image)


class HttpRemover(Remover):
    """Mask-guided remover client."""

    def __init__(self, endpoint: HttpEndpoint, locality: Locality = "local"):
        self.endpoint = endpoint
        self.locality = locality

    def remove(self, image: Image, mask: Mask) -> Image:
        """POST /remove; the edit must keep the input size."""
        request = RemoveRequest(image_b64=image_to_b64(image), mask_b64=mask_to_b64(mask))
        resp = _parse(RemoveResponse, self.endpoint.post("/remove", request), "remover")
        try:
            edited = image_from_b64(resp.image_b64)
        except RasterError as e:
            raise BackendError(f"Remover returned an undecodable image: {e}") from e
        if edited.size != image.size:
            raise BackendError(f"Remover returned {edited.size}, expected {image.size}")
        return edited


class HttpEmbedder(Embedder):
    """Embedding service client."""

    def __init__(self, endpoint: HttpEndpoint):
        self.endpoint = endpoint

    def embed(self, image: Image) -> np.ndarray:
        """POST /embed."""
        body = self.endpoint.post("/embed", EmbedRequest(image_b64=image_to_b64(image)))
        return np.asarray(_parse(EmbedResponse, body, "embedder").vector, dtype=np.float64)


class HttpPairScorer(PairScorer):
    """Pair scorer service client."""

    def __init__(self, endpoint: HttpEndpoint):
        self.endpoint = endpoint

    def score_pair(self, a: Image, b: Image) -> float:
        """POST /score_pair."""
        request = ScorePairRequest(image_a_b64=image_to_b64(a), image_b_b64=image_to_b64(b))
        return _parse(ScorePairResponse, self.endpoint.post("/score_pair", request), "scorer").score


def http_backends(
    settings: Settings | None = None,
    *,
    max_parallel: int = 4,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> BackendSet:
    """Build the live backend set from environment settings.

    Every endpoint shares one client. A client built here is closed by
    ``BackendSet.close``; a caller-supplied client stays with the caller.
    """
    settings = settings or get_settings()
    missing = [
        name
        for name in ("REORM_VISION_URL", "REORM_SEGMENTER_URL", "REORM_REMOVER_URL")
        if not getattr(settings, name)
    ]
    if missing:
        raise ConfigError(f"HTTP backends need {', '.join(missing)}")

    owned = client is None
    shared = client or build_client(settings, max_parallel)

    def endpoint(url: str, kind: str) -> HttpEndpoint:
        return HttpEndpoint(url, kind, settings=settings, client=shared, max_parallel=max_parallel, sleep=sleep)

    vision = HttpReasoner(
        endpoint(settings.REORM_VISION_URL, "vision"), settings.REORM_VISION_MODEL, settings.REORM_VISION_LOCALITY
    )
    if settings.REORM_TEXT_URL or settings.REORM_TEXT_MODEL:
        text = HttpReasoner(
            endpoint(settings.REORM_TEXT_URL or settings.REORM_VISION_URL, "text"),
            settings.REORM_TEXT_MODEL or settings.REORM_VISION_MODEL,
            settings.REORM_TEXT_LOCALITY,
        )
    else:
        # one chat model plays every role
        text = vision

    return BackendSet(
        vision_reasoner=vision,
        text_reasoner=text,
        segmenter=HttpSegmenter(endpoint(settings.REORM_SEGMENTER_URL, "segmenter"), settings.REORM_SEGMENTER_LOCALITY),
        remover=HttpRemover(endpoint(settings.REORM_REMOVER_URL, "remover"), settings.REORM_REMOVER_LOCALITY),
        correction_remover=(
            HttpRemover(
                endpoint(settings.REORM_CORRECTION_REMOVER_URL, "correction_remover"),
                settings.REORM_REMOVER_LOCALITY,
            )
            if settings.REORM_CORRECTION_REMOVER_URL
            else None
        ),
        embedder=(
            HttpEmbedder(endpoint(settings.REORM_EMBEDDER_URL, "embedder")) if settings.REORM_EMBEDDER_URL else None
        ),
        scorer=HttpPairScorer(endpoint(settings.REORM_SCORER_URL, "scorer")) if settings.REORM_SCORER_URL else None,
        on_close=shared.close if owned else None,
    )
