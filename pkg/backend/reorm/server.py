"""HTTP surface of the oracle world.

Serves the chat-completions, segmentation and removal endpoints from a
scene graph so the live HTTP backends can be exercised end to end.
"""

import logging

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from prometheus_client import CONTENT_TYPE_LATEST, generate_latest

from reorm.backends.base import BackendSet, Remover
from reorm.backends.http_backend import CHAT_PATH
from reorm.backends.wire import (
    AssistantMessage,
    ChatChoice,
    ChatRequest,
    ChatResponse,
    RemoveRequest,
    RemoveResponse,
    SegmentRequest,
    SegmentResponse,
    segment_result_to_wire,
    split_chat_request,
)
from reorm.config import get_settings
from reorm.errors import PromptInputError, ReormError
from reorm.oracle.backends import OracleReasoner, oracle_backends
from reorm.oracle.scene import SceneGraph
from reorm.prompts import role_for_system_text
from reorm.raster import image_from_b64, image_to_b64, mask_from_b64

logger = logging.getLogger(__name__)

CORRECTION_PREFIX = "/correction"


def _remove(remover: Remover, req: RemoveRequest) -> RemoveResponse:
    edited = remover.remove(image_from_b64(req.image_b64), mask_from_b64(req.mask_b64))
    return RemoveResponse(image_b64=image_to_b64(edited))


def create_oracle_app(
    scene: SceneGraph,
    faulty_object: str | None = None,
    simulator_omits: list[str] | None = None,
) -> FastAPI:
    """Build the app; a faulty remover also exposes ``/correction/remove``."""
    backends: BackendSet = oracle_backends(scene, faulty_object, simulator_omits)
    reasoner = backends.vision_reasoner
    assert isinstance(reasoner, OracleReasoner)

    app = FastAPI(title="REORM oracle", version=get_settings().VERSION)
    app.state.backends = backends

    @app.exception_handler(ReormError)
    async def reorm_error_handler(request: Request, exc: ReormError):
        logger.warning("Request rejected", extra={"path": request.url.path, "error": str(exc)})
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/healthz", tags=["ops"])
    def healthz():
        """Liveness plus the size of the served scene."""
        return {"ok": True, "objects": len(scene.objects), "edges": len(scene.edges), "version": app.version}

    @app.get("/metrics", response_class=PlainTextResponse, tags=["ops"])
    def metrics():
        """Return Prometheus metrics in PlainText format."""
        return PlainTextResponse(generate_latest(), media_type=CONTENT_TYPE_LATEST)

    @app.post(CHAT_PATH, response_model=ChatResponse, tags=["reasoner"])
    def chat_completions(req: ChatRequest):
        """Answer any stage prompt; the stage is recognised from the system text."""
        try:
            system_text, user_text, image = split_chat_request(req)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        role = role_for_system_text(system_text)
        if role is None:
            raise HTTPException(status_code=422, detail="unknown system prompt")
        try:
            text = reasoner.answer(role, user_text, image)
        except PromptInputError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        logger.debug("Answered chat request", extra={"role": role.value, "model": req.model})
        return ChatResponse(choices=[ChatChoice(message=AssistantMessage(content=text))])

    @app.post("/segment", response_model=SegmentResponse, tags=["tools"])
    def segment(req: SegmentRequest):
        image = image_from_b64(req.image_b64)
        return segment_result_to_wire(backends.segmenter.segment(image, req.labels))

    @app.post("/remove", response_model=RemoveResponse, tags=["tools"])
    def remove(req: RemoveRequest):
        return _remove(backends.remover, req)

    if backends.correction_remover is not None:
        correction_remover = backends.correction_remover

        @app.post(f"{CORRECTION_PREFIX}/remove", response_model=RemoveResponse, tags=["tools"])
        def correction_remove(req: RemoveRequest):
            return _remove(correction_remover, req)

    return app
