"""Record/replay fixtures keyed by a stable hash of each backend request."""

import json
import logging
import threading
from pathlib import Path
from typing import Any, Literal

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
    EmbedResponse,
    ReasonerPayload,
    RemoveResponse,
    ScorePairResponse,
    SegmentResponse,
    segment_result_from_wire,
    segment_result_to_wire,
)
from reorm.config import Locality, Settings, get_settings
from reorm.errors import ConfigError, MissingFixture
from reorm.metrics import fixture_misses
from reorm.raster import Image, Mask, image_from_b64, image_to_b64
from reorm.schemas import PromptBundle
from reorm.util import make_request_key

logger = logging.getLogger(__name__)

FixtureMode = Literal["record", "replay"]


class FixtureRecord(BaseModel):
    """One stored request/response pair."""

    key_hash: str
    kind: str
    response_payload: dict[str, Any]


class FixtureStore:
    """JSON-lines fixture file.

    Record mode appends each new request once; replay mode never writes.
    Appends are serialized by a lock, lookups may run concurrently.
    """

    def __init__(self, path: str | Path, mode: FixtureMode = "replay"):
        self.path = Path(path)
        self.mode = mode
        self._records: dict[str, FixtureRecord] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()
        elif mode == "replay":
            raise ConfigError(f"Fixture file not found: {self.path}")

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = FixtureRecord.model_validate_json(line)
                except ValidationError as e:
                    raise ConfigError(f"{self.path}: line {lineno}: invalid fixture record: {e}") from e
                self._records.setdefault(record.key_hash, record)
        logger.info("Loaded fixtures", extra={"path": str(self.path), "records": len(self._records)})

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def records(self) -> list[FixtureRecord]:
        """Stored records in insertion order."""
        return list(self._records.values())

    def has_kind(self, prefix: str) -> bool:
        """True when any record's kind starts with ``prefix``."""
        return any(r.kind.startswith(prefix) for r in self._records.values())

    def lookup(self, key: str) -> dict[str, Any] | None:
        """Stored response payload for ``key``, if any."""
        record = self._records.get(key)
        return record.response_payload if record else None

    def record(self, key: str, kind: str, payload: dict[str, Any]) -> bool:
        """Append a new pair; returns False when the key was already stored."""
        if self.mode != "record":
            raise RuntimeError("fixture store is read-only in replay mode")
        with self._lock:
            if key in self._records:
                return False
            record = FixtureRecord(key_hash=key, kind=kind, response_payload=payload)
            self._records[key] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.model_dump_json() + "\n")
            return True

    def save(self, path: str | Path) -> Path:
        """Write every record to ``path`` in insertion order."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for record in self._records.values():
                fh.write(record.model_dump_json() + "\n")
        return path


class _FixtureBacked:
    """Shared lookup-or-record logic of the fixture wrappers."""

    def __init__(self, store: FixtureStore, slot: str, inner: Any | None, locality: Locality):
        self.store = store
        self.slot = slot
        self.inner = inner
        self.locality = getattr(inner, "locality", locality)

    def _fetch(self, method: str, body: dict[str, Any], images: list[Image], call) -> dict[str, Any]:
        kind = f"{self.slot}.{method}"
        key = make_request_key(kind, body, [img.digest() for img in images])
        payload = self.store.lookup(key)
        if payload is not None:
            return payload
        if self.inner is None or self.store.mode == "replay":
            fixture_misses.labels(kind=kind).inc()
            raise MissingFixture(kind, key)
        payload = call()
        self.store.record(key, kind, payload)
        return payload


class FixtureReasoner(_FixtureBacked, Reasoner):
    """Reasoner slot."""

    def vision_reason(self, bundle: PromptBundle, image: Image) -> str:
        """Recorded vision answer."""
        require_image_bundle(bundle)
        payload = self._fetch(
            "vision_reason",
            bundle.request_body(),
            [image],
            lambda: ReasonerPayload(text=self.inner.vision_reason(bundle, image)).model_dump(),
        )
        return ReasonerPayload.model_validate(payload).text

    def text_reason(self, bundle: PromptBundle) -> str:
        """Recorded text answer."""
        require_text_bundle(bundle)
        payload = self._fetch(
            "text_reason",
            bundle.request_body(),
            [],
            lambda: ReasonerPayload(text=self.inner.text_reason(bundle)).model_dump(),
        )
        return ReasonerPayload.model_validate(payload).text


class FixtureSegmenter(_FixtureBacked, Segmenter):
    """Segmenter slot."""

    def segment(self, image: Image, labels: list[str]) -> SegmentResult:
        """Recorded segmentation."""
        payload = self._fetch(
            "segment",
            {"labels": list(labels)},
            [image],
            lambda: segment_result_to_wire(self.inner.segment(image, labels)).model_dump(),
        )
        return segment_result_from_wire(SegmentResponse.model_validate(payload)).validate(image)


class FixtureRemover(_FixtureBacked, Remover):
    """Remover slot."""

    def remove(self, image: Image, mask: Mask) -> Image:
        """Recorded edit."""
        payload = self._fetch(
            "remove",
            {"mask": mask.digest()},
            [image],
            lambda: RemoveResponse(image_b64=image_to_b64(self.inner.remove(image, mask))).model_dump(),
        )
        return image_from_b64(RemoveResponse.model_validate(payload).image_b64)


class FixtureEmbedder(_FixtureBacked, Embedder):
    """Embedder slot."""

    def embed(self, image: Image) -> np.ndarray:
        """Recorded embedding."""
        payload = self._fetch(
            "embed",
            {},
            [image],
            lambda: EmbedResponse(vector=[float(x) for x in self.inner.embed(image)]).model_dump(),
        )
        return np.asarray(EmbedResponse.model_validate(payload).vector, dtype=np.float64)


class FixturePairScorer(_FixtureBacked, PairScorer):
    """Pair scorer slot."""

    def score_pair(self, a: Image, b: Image) -> float:
        """Recorded pair score."""
        payload = self._fetch(
            "score_pair",
            {},
            [a, b],
            lambda: ScorePairResponse(score=float(self.inner.score_pair(a, b))).model_dump(),
        )
        return ScorePairResponse.model_validate(payload).score


def fixture_backends(
    store: FixtureStore,
    inner: BackendSet | None = None,
    settings: Settings | None = None,
) -> BackendSet:
    """Wrap ``inner`` for recording, or build a model-free replay set when it is None.

    In replay the optional slots exist only when the fixtures hold calls for
    them, so a replayed run takes the same path as the recorded one.
    """
    settings = settings or get_settings()
    if inner is None and store.mode == "record":
        raise ConfigError("record mode needs live backends to record from")

    def slot(name: str, cls, live, locality: Locality):
        if inner is not None:
            return cls(store, name, live, locality) if live is not None else None
        return cls(store, name, None, locality) if store.has_kind(f"{name}.") else None

    vision = FixtureReasoner(store, "vision", inner.vision_reasoner if inner else None, settings.REORM_VISION_LOCALITY)
    text = FixtureReasoner(store, "text", inner.text_reasoner if inner else None, settings.REORM_TEXT_LOCALITY)
    return BackendSet(
        vision_reasoner=vision,
        text_reasoner=text,
        segmenter=FixtureSegmenter(
            store, "segmenter", inner.segmenter if inner else None, settings.REORM_SEGMENTER_LOCALITY
        ),
        remover=FixtureRemover(store, "remover", inner.remover if inner else None, settings.REORM_REMOVER_LOCALITY),
        correction_remover=slot(
            "correction_remover",
            FixtureRemover,
            inner.correction_remover if inner else None,
            settings.REORM_REMOVER_LOCALITY,
        ),
        embedder=slot("embedder", FixtureEmbedder, inner.embedder if inner else None, "local"),
        scorer=slot("scorer", FixturePairScorer, inner.scorer if inner else None, "local"),
        on_close=inner.close if inner is not None else None,
    )


def load_fixture_file(path: str | Path) -> list[dict[str, Any]]:
    """Raw records of a fixture file, for inspection tools and tests."""
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
