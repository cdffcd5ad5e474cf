"""Test configuration and fixtures for the REORM test suite.

This module provides shared pytest fixtures for all tests, including:
- Small deterministic oracle scenes
- Oracle backend sets
- Scratch output directories
"""

import os
import sys

# Ensure backend is on sys.path so imports like `import reorm.raster` work
# regardless of the current working directory or pytest --rootdir used by VS Code.
ROOT = os.path.dirname(os.path.dirname(__file__))
BACKEND_PATH = os.path.join(ROOT, "backend")
if BACKEND_PATH not in sys.path:
    sys.path.insert(0, BACKEND_PATH)

import pytest

# Set test environment variables before importing package modules
os.environ["SKIP_STARTUP_VALIDATION"] = "true"
os.environ["LOG_LEVEL"] = "WARNING"
os.environ["RETRY_BACKOFF_BASE"] = "0"
for _name in (
    "REORM_VISION_URL",
    "REORM_TEXT_URL",
    "REORM_TEXT_MODEL",
    "REORM_SEGMENTER_URL",
    "REORM_REMOVER_URL",
    "REORM_CORRECTION_REMOVER_URL",
    "REORM_EMBEDDER_URL",
    "REORM_SCORER_URL",
    "REORM_API_KEY",
):
    os.environ.pop(_name, None)

from reorm.config import get_settings
from reorm.oracle.backends import oracle_backends
from reorm.oracle.scene import Canvas, SceneEdge, SceneGraph, SceneObject
from reorm.schemas import InteractionKind


def make_person_scene() -> SceneGraph:
    """Person casting a shadow, holding a can, next to an unrelated lamp."""
    return SceneGraph(
        objects=[
            SceneObject(id="o0", name="person", shape="rect", color=(200, 40, 40), position=(12, 12), size=(40, 48)),
            SceneObject(
                id="o1",
                name="person's shadow",
                shape="ellipse",
                color=(92, 92, 92),
                position=(84, 12),
                size=(44, 30),
            ),
            SceneObject(
                id="o2", name="watering can", shape="rect", color=(40, 160, 60), position=(12, 84), size=(30, 30)
            ),
            SceneObject(id="o3", name="lamp", shape="ellipse", color=(40, 60, 200), position=(84, 84), size=(36, 36)),
        ],
        edges=[
            SceneEdge(src="o0", dst="o1", kind=InteractionKind.LIGHTING_DEPENDENT),
            SceneEdge(src="o0", dst="o2", kind=InteractionKind.PHYSICALLY_CONNECTED),
        ],
        canvas=Canvas(width=144, height=144, background=(236, 232, 222)),
    )


@pytest.fixture
def person_scene():
    """Hand-built four-object scene."""
    return make_person_scene()


@pytest.fixture
def person_backends(person_scene):
    """Oracle backends for the hand-built scene."""
    return oracle_backends(person_scene)


@pytest.fixture(autouse=True)
def _fresh_settings():
    """Settings are cached; every test starts from the environment."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
