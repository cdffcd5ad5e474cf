"""Request/response schemas of the chat, segmenter, remover and metric endpoints."""

from typing import Literal

from pydantic import BaseModel, Field

from reorm.backends.base import SegmentInstance, SegmentResult
from reorm.raster import Image, image_from_b64, image_to_b64, mask_from_b64, mask_to_b64

DATA_URL_PREFIX = "data:image/png;base64,"


# Chat completions
class TextPart(BaseModel):
    type: Literal["text"] = "text"
    text: str


class ImageUrl(BaseModel):
    url: str


class ImagePart(BaseModel):
    type: Literal["image_url"] = "image_url"
    image_url: ImageUrl


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: list[TextPart | ImagePart] | str


class ChatRequest(BaseModel):
    model: str
    messages: list[ChatMessage] = Field(..., min_length=1)


class AssistantMessage(BaseModel):
    role: str = "assistant"
    content: str


class ChatChoice(BaseModel):
    index: int = 0
    message: AssistantMessage


class ChatResponse(BaseModel):
    choices: list[ChatChoice] = Field(..., min_length=1)

    @property
    def text(self) -> str:
        """Content of the first choice."""
        return self.choices[0].message.content


def image_data_url(image: Image) -> str:
    """PNG data URL for an image part."""
    return DATA_URL_PREFIX + image_to_b64(image)


def image_from_data_url(url: str) -> Image:
    """Decode a ``data:image/png;base64,...`` URL."""
    if not url.startswith(DATA_URL_PREFIX):
        raise ValueError("only base64 PNG data URLs are accepted")
    return image_from_b64(url[len(DATA_URL_PREFIX) :])


def build_chat_request(model: str, system_text: str, user_text: str, image: Image | None = None) -> ChatRequest:
    """System turn plus one user turn; the image part goes after the text."""
    content: list[TextPart | ImagePart] = [TextPart(text=user_text)]
    if image is not None:
        content.append(ImagePart(image_url=ImageUrl(url=image_data_url(image))))
    return ChatRequest(
        model=model,
        messages=[
            ChatMessage(role="system", content=system_text),
            ChatMessage(role="user", content=content),
        ],
    )


def split_chat_request(req: ChatRequest) -> tuple[str, str, Image | None]:
    """Inverse of ``build_chat_request``: (system text, user text, image)."""
    system_text, user_parts, image = "", [], None
    for msg in req.messages:
        parts = [TextPart(text=msg.content)] if isinstance(msg.content, str) else msg.content
        for part in parts:
            if isinstance(part, ImagePart):
                image = image_from_data_url(part.image_url.url)
            elif msg.role == "system":
                system_text += part.text
            elif msg.role == "user":
                user_parts.append(part.text)
    return system_text, "\n".join(user_parts), image


# Mask-guided services
class SegmentRequest(BaseModel):
    image_b64: str
    labels: list[str] = Field(..., min_length=1)


class SegmentInstanceWire(BaseModel):
    mask_b64: str
    score: float = Field(..., ge=0.0, le=1.0)


class SegmentResponse(BaseModel):
    results: dict[str, list[SegmentInstanceWire]] = Field(default_factory=dict)


class RemoveRequest(BaseModel):
    image_b64: str
    mask_b64: str


class RemoveResponse(BaseModel):
    image_b64: str


# Metric providers
class EmbedRequest(BaseModel):
    image_b64: str


class EmbedResponse(BaseModel):
    vector: list[float] = Field(..., min_length=1)


class ScorePairRequest(BaseModel):
    image_a_b64: str
    image_b_b64: str


class ScorePairResponse(BaseModel):
    score: float


class ReasonerPayload(BaseModel):
    """Recorded completion text of a reasoner call."""

    text: str


def segment_result_to_wire(result: SegmentResult) -> SegmentResponse:
    """Wire body of a segmentation."""
    return SegmentResponse(
        results={
            label: [SegmentInstanceWire(mask_b64=mask_to_b64(inst.mask), score=inst.score) for inst in found]
            for label, found in result.instances.items()
        }
    )


def segment_result_from_wire(resp: SegmentResponse) -> SegmentResult:
    """Domain segmentation from the wire body."""
    return SegmentResult(
        instances={
            label: [SegmentInstance(mask=mask_from_b64(w.mask_b64), score=w.score) for w in found]
            for label, found in resp.results.items()
        }
    )
