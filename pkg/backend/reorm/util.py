"""Utility functions for hashing requests and raster payloads."""

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def make_request_key(kind: str, body: dict[str, Any], image_digests: list[str]) -> str:
    """Generate the stable fixture key of a backend request."""
    base = {
        "kind": kind,
        "body": body,
        "images": list(image_digests),
    }
    return hashlib.sha256(canonical_json(base).encode("utf-8")).hexdigest()


def sha256_hex(data: bytes) -> str:
    """Return hex SHA-256 of raw bytes."""
    return hashlib.sha256(data).hexdigest()
