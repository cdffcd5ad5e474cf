"""Abstract model capabilities the pipeline is written against."""

from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from reorm.config import Locality
from reorm.errors import BackendError, PromptInputError
from reorm.raster import Image, Mask
from reorm.schemas import PromptBundle


@dataclass(frozen=True)
class SegmentInstance:
    """One detected instance of a label."""

    mask: Mask
    score: float


@dataclass(frozen=True)
class SegmentResult:
    """Per-label instances; an empty list means the label was not found."""

    instances: dict[str, list[SegmentInstance]] = field(default_factory=dict)

    def for_label(self, label: str) -> list[SegmentInstance]:
        """Instances found for ``label`` (empty when none)."""
        return self.instances.get(label, [])

    def validate(self, image: Image) -> "SegmentResult":
        """Check every mask covers ``image`` and every score lies in [0, 1]."""
        for label, found in self.instances.items():
            for inst in found:
                if inst.mask.size != image.size:
                    raise BackendError(f"Segment mask for {label!r} is {inst.mask.size}, image is {image.size}")
                if not 0.0 <= inst.score <= 1.0:
                    raise BackendError(f"Segment score for {label!r} out of range: {inst.score}")
        return self


def require_image_bundle(bundle: PromptBundle) -> None:
    """Visual stages need an image."""
    if not bundle.attach_image:
        raise PromptInputError(f"{bundle.role.value} prompt is text-only; use text_reason")


def require_text_bundle(bundle: PromptBundle) -> None:
    """Text-only steps must not carry an image."""
    if bundle.attach_image:
        raise PromptInputError(f"{bundle.role.value} prompt needs an image; use vision_reason")


class Reasoner(ABC):
    """Chat model. The vision reasoner also serves text-only prompts in the ablations."""

    locality: Locality = "remote"

    @abstractmethod
    def vision_reason(self, bundle: PromptBundle, image: Image) -> str:
        """Complete an image-conditioned prompt."""

    @abstractmethod
    def text_reason(self, bundle: PromptBundle) -> str:
        """Complete a text-only prompt."""


class Segmenter(ABC):
    """Open-vocabulary segmentation."""

    locality: Locality = "local"

    @abstractmethod
    def segment(self, image: Image, labels: list[str]) -> SegmentResult:
        """Return zero or more instances per label."""


class Remover(ABC):
    """Mask-guided object removal."""

    locality: Locality = "local"

    @abstractmethod
    def remove(self, image: Image, mask: Mask) -> Image:
        """Return the edited image, same dimensions as the input."""


class Embedder(ABC):
    """Global image embedding for the DINO-style similarity score."""

    locality: Locality = "local"

    @abstractmethod
    def embed(self, image: Image) -> np.ndarray:
        """Return a 1-D vector."""


class PairScorer(ABC):
    """Perceptual distance between two images (LPIPS-style)."""

    locality: Locality = "local"

    @abstractmethod
    def score_pair(self, a: Image, b: Image) -> float:
        """Return a distance, 0 for identical images."""


@dataclass(frozen=True)
class BackendSet:
    """Every backend handle a pipeline run needs.

    In the cloud layout ``vision_reasoner`` and ``text_reasoner`` may be the
    same object; the local layout pairs a small vision model with a text LLM.
    """

    vision_reasoner: Reasoner
    text_reasoner: Reasoner
    segmenter: Segmenter
    remover: Remover
    correction_remover: Remover | None = None
    embedder: Embedder | None = None
    scorer: PairScorer | None = None
    on_close: Callable[[], None] | None = field(default=None, repr=False, compare=False)

    def remover_for_correction(self) -> Remover:
        """Second remover endpoint when configured, otherwise the primary one."""
        return self.correction_remover or self.remover

    def close(self) -> None:
        """Release transport resources such as a shared HTTP client."""
        if self.on_close is not None:
            self.on_close()

    def __enter__(self) -> "BackendSet":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
