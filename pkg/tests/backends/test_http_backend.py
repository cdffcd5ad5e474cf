"""Tests for the httpx backend clients.

Live round trips go through the oracle FastAPI app; retry behaviour is
checked against an ``httpx.MockTransport``.
"""

import json

import httpx
import pytest
from fastapi.testclient import TestClient
from reorm.backends.http_backend import CHAT_PATH, HttpEndpoint, http_backends
from reorm.backends.wire import EmbedRequest, RemoveResponse
from reorm.config import Settings
from reorm.errors import BackendError, ConfigError, PromptInputError, RateLimitError, TransportError
from reorm.oracle.scene import footprint_mask, render
from reorm.parsing import parse_analyzer_response
from reorm.prompts import render_analyzer, render_chain_step
from reorm.raster import Image, image_to_b64, mask_union
from reorm.schemas import ChainStep
from reorm.server import create_oracle_app

BASE = "http://testserver"
CHAT_OK = {"choices": [{"index": 0, "message": {"role": "assistant", "content": "hello"}}]}


def _settings(**overrides):
    values = {
        "REORM_VISION_URL": BASE,
        "REORM_SEGMENTER_URL": BASE,
        "REORM_REMOVER_URL": BASE,
        "RETRY_BACKOFF_BASE": 1.0,
        "MAX_RETRIES": 3,
        **overrides,
    }
    return Settings(_env_file=None, **values)


class _Recorder:
    """MockTransport handler that replays a scripted list of responses.

    Items are exceptions to raise or ``(status, kwargs)`` pairs; the last one
    repeats once the script runs out.
    """

    def __init__(self, script):
        self.script = list(script)
        self.bodies: list[bytes] = []
        self.headers: list[httpx.Headers] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.bodies.append(request.content)
        self.headers.append(request.headers)
        item = self.script.pop(0) if len(self.script) > 1 else self.script[0]
        if isinstance(item, Exception):
            raise item
        status, kwargs = item
        return httpx.Response(status, **kwargs)


def _endpoint(recorder, settings=None, sleeps=None):
    sleeps = sleeps if sleeps is not None else []
    return HttpEndpoint(
        BASE,
        "vision",
        settings=settings or _settings(),
        client=httpx.Client(transport=httpx.MockTransport(recorder)),
        sleep=sleeps.append,
    )


@pytest.fixture
def oracle_client(person_scene):
    return TestClient(create_oracle_app(person_scene, faulty_object="lamp"))


class TestLiveRoundTrip:
    def test_analyzer_through_chat_endpoint(self, person_scene, oracle_client):
        backends = http_backends(_settings(), client=oracle_client, sleep=lambda _: None)
        text = backends.vision_reasoner.vision_reason(render_analyzer("Remove the person."), render(person_scene))
        assert parse_analyzer_response(text).labels == ["person", "the person's shadow", "the watering can"]

    def test_text_reasoner_defaults_to_vision(self, oracle_client):
        backends = http_backends(_settings(), client=oracle_client)
        assert backends.text_reasoner is backends.vision_reasoner
        separate = http_backends(_settings(REORM_TEXT_MODEL="qwen-14b"), client=oracle_client)
        assert separate.text_reasoner is not separate.vision_reasoner
        assert separate.text_reasoner.model == "qwen-14b"
        assert separate.text_reasoner.endpoint.base_url == BASE

    def test_text_step_through_chat_endpoint(self, oracle_client):
        backends = http_backends(_settings(), client=oracle_client)
        bundle = render_chain_step(ChainStep.IDENTIFY_TARGET, "Remove the lamp.")
        assert backends.text_reasoner.text_reason(bundle) == "Target: lamp"
        with pytest.raises(PromptInputError):
            backends.text_reasoner.vision_reason(bundle, Image.blank(4, 4))

    def test_segment_and_remove(self, person_scene, oracle_client):
        backends = http_backends(_settings(), client=oracle_client)
        image = render(person_scene)

        result = backends.segmenter.segment(image, ["person", "unicorn"])
        assert result.for_label("unicorn") == []
        [inst] = result.for_label("person")
        assert inst.mask == footprint_mask(person_scene, "o0")
        assert 0.0 <= inst.score <= 1.0

        mask = mask_union([footprint_mask(person_scene, "o0"), footprint_mask(person_scene, "o1")])
        assert backends.remover.remove(image, mask) == render(person_scene, {"o0", "o1"})

    def test_correction_remover_endpoint(self, person_scene, oracle_client):
        settings = _settings(REORM_CORRECTION_REMOVER_URL=f"{BASE}/correction")
        backends = http_backends(settings, client=oracle_client)
        image = render(person_scene)
        mask = footprint_mask(person_scene, "o3")
        # the primary remover is faulty on the lamp, the correction remover is not
        assert backends.remover.remove(image, mask) == image
        assert backends.remover_for_correction().remove(image, mask) == render(person_scene, {"o3"})

    def test_missing_urls(self):
        with pytest.raises(ConfigError, match="REORM_REMOVER_URL"):
            http_backends(_settings(REORM_REMOVER_URL=None))


class TestRetries:
    def test_retries_on_503_with_identical_bodies(self):
        recorder = _Recorder([(503, {}), (503, {}), (200, {"json": CHAT_OK})])
        sleeps: list[float] = []
        body = _endpoint(recorder, sleeps=sleeps).post(CHAT_PATH, EmbedRequest(image_b64="abc"))

        assert body == CHAT_OK
        assert len(recorder.bodies) == 3
        assert len(set(recorder.bodies)) == 1
        assert json.loads(recorder.bodies[0]) == {"image_b64": "abc"}
        assert sleeps == [1.0, 2.0]

    def test_retry_after_header_is_honoured(self):
        recorder = _Recorder([(429, {"headers": {"Retry-After": "3"}}), (200, {"json": CHAT_OK})])
        sleeps: list[float] = []
        _endpoint(recorder, sleeps=sleeps).post(CHAT_PATH, EmbedRequest(image_b64="abc"))
        assert sleeps == [3.0]

    def test_persistent_429_raises_rate_limit(self):
        recorder = _Recorder([(429, {})])
        with pytest.raises(RateLimitError):
            _endpoint(recorder, settings=_settings(MAX_RETRIES=2)).post(CHAT_PATH, EmbedRequest(image_b64="abc"))
        assert len(recorder.bodies) == 3

    def test_client_error_is_not_retried(self):
        recorder = _Recorder([(400, {"text": "bad image"})])
        sleeps: list[float] = []
        with pytest.raises(TransportError, match="400"):
            _endpoint(recorder, sleeps=sleeps).post(CHAT_PATH, EmbedRequest(image_b64="abc"))
        assert len(recorder.bodies) == 1
        assert sleeps == []

    def test_timeouts_are_retried_then_raised(self):
        recorder = _Recorder([httpx.ConnectTimeout("slow")])
        with pytest.raises(TransportError, match="timed out"):
            _endpoint(recorder, settings=_settings(MAX_RETRIES=1)).post(CHAT_PATH, EmbedRequest(image_b64="abc"))
        assert len(recorder.bodies) == 2

    def test_invalid_json_body(self):
        recorder = _Recorder([(200, {"text": "not json"})])
        with pytest.raises(TransportError, match="invalid JSON"):
            _endpoint(recorder).post(CHAT_PATH, EmbedRequest(image_b64="abc"))

    def test_api_key_header(self):
        recorder = _Recorder([(200, {"json": CHAT_OK})])
        _endpoint(recorder, settings=_settings(REORM_API_KEY="sk-test")).post(CHAT_PATH, EmbedRequest(image_b64="a"))
        assert recorder.headers[0]["Authorization"] == "Bearer sk-test"
        assert recorder.headers[0]["Content-Type"] == "application/json"


def test_remover_size_mismatch():
    small = Image.blank(2, 2)
    recorder = _Recorder([(200, {"json": RemoveResponse(image_b64=image_to_b64(small)).model_dump()})])
    backends = http_backends(_settings(), client=httpx.Client(transport=httpx.MockTransport(recorder)))
    image = Image.blank(4, 4)
    with pytest.raises(BackendError, match="expected"):
        backends.remover.remove(image, mask_union([], image))


def test_unexpected_segment_body():
    recorder = _Recorder([(200, {"json": {"results": {"dog": [{"mask_b64": "x", "score": 7}]}}})])
    backends = http_backends(_settings(), client=httpx.Client(transport=httpx.MockTransport(recorder)))
    with pytest.raises(TransportError, match="unexpected body"):
        backends.segmenter.segment(Image.blank(4, 4), ["dog"])


class TestUndecodablePayloads:
    def _backends(self, body):
        recorder = _Recorder([(200, {"json": body})])
        return http_backends(_settings(), client=httpx.Client(transport=httpx.MockTransport(recorder)))

    def test_remover_invalid_base64(self):
        image = Image.blank(4, 4)
        with pytest.raises(BackendError, match="undecodable image"):
            self._backends({"image_b64": "x"}).remover.remove(image, mask_union([], image))

    def test_remover_non_image_bytes(self):
        image = Image.blank(4, 4)
        with pytest.raises(BackendError, match="undecodable image"):
            self._backends({"image_b64": "aGVsbG8="}).remover.remove(image, mask_union([], image))

    def test_segmenter_invalid_mask(self):
        body = {"results": {"dog": [{"mask_b64": "x", "score": 0.9}]}}
        with pytest.raises(BackendError, match="undecodable mask"):
            self._backends(body).segmenter.segment(Image.blank(4, 4), ["dog"])


class TestClientLifecycle:
    def test_endpoints_share_one_owned_client(self):
        backends = http_backends(_settings(REORM_CORRECTION_REMOVER_URL=BASE, REORM_TEXT_MODEL="small"))
        clients = {
            id(backends.vision_reasoner.endpoint._client),
            id(backends.text_reasoner.endpoint._client),
            id(backends.segmenter.endpoint._client),
            id(backends.remover.endpoint._client),
            id(backends.correction_remover.endpoint._client),
        }
        assert len(clients) == 1
        client = backends.remover.endpoint._client
        with backends:
            assert not client.is_closed
        assert client.is_closed

    def test_caller_client_is_left_open(self):
        client = httpx.Client(transport=httpx.MockTransport(_Recorder([(200, {"json": CHAT_OK})])))
        http_backends(_settings(), client=client).close()
        assert not client.is_closed
        client.close()
