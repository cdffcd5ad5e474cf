"""Synthetic scene graphs with interaction dependencies and a flat 2-D renderer.

Objects occupy disjoint grid cells, so every object stays fully visible and
removing one restores exactly the background pixels of its footprint.
"""

import json
import math
import re
from collections import deque
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from reorm.errors import SceneError
from reorm.raster import Image, Mask
from reorm.schemas import InteractionKind

Color = tuple[int, int, int]

CELL = 72
CELL_MARGIN = 12
MIN_SIDE = 24
MAX_SIDE = CELL - 2 * CELL_MARGIN
BACKGROUND: Color = (236, 232, 222)
SHADOW_GRAY: Color = (92, 92, 92)
REFLECTION_GRAY: Color = (168, 168, 172)

PALETTE: dict[str, Color] = {
    "red": (200, 40, 40),
    "blue": (40, 70, 200),
    "green": (40, 150, 60),
    "yellow": (230, 200, 30),
    "orange": (240, 130, 20),
    "purple": (130, 50, 170),
    "teal": (20, 140, 140),
    "brown": (120, 75, 35),
    "pink": (235, 120, 170),
    "navy": (20, 30, 90),
    "olive": (110, 120, 30),
    "maroon": (110, 20, 40),
}
# fmt: off
NOUNS = [
    "ball", "box", "lamp", "cup", "chair", "dog", "bag", "kite",
    "book", "vase", "bottle", "hat", "scooter", "sign", "bucket", "umbrella",
]
# fmt: on


class SceneObject(BaseModel):
    """One solid shape. ``position`` is the top-left corner, ``size`` is (w, h)."""

    model_config = ConfigDict(frozen=True)

    id: str
    name: str = Field(..., min_length=1)
    shape: Literal["rect", "ellipse"]
    color: Color
    position: tuple[int, int]
    size: tuple[int, int]


class SceneEdge(BaseModel):
    """Dependency from an object to an element that depends on it."""

    model_config = ConfigDict(frozen=True)

    src: str
    dst: str
    kind: InteractionKind


class Canvas(BaseModel):
    """Canvas size and background color."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    background: Color = BACKGROUND


class SceneGraph(BaseModel):
    """Immutable scene: objects, dependency DAG and canvas."""

    model_config = ConfigDict(frozen=True)

    objects: list[SceneObject]
    edges: list[SceneEdge] = Field(default_factory=list)
    canvas: Canvas

    @model_validator(mode="after")
    def _check_graph(self) -> "SceneGraph":
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        known = set(ids)
        for e in self.edges:
            if e.src not in known or e.dst not in known:
                raise ValueError(f"edge {e.src}->{e.dst} references an unknown object")
            if e.src == e.dst:
                raise ValueError(f"self-loop on {e.src}")
        # Kahn's algorithm; leftover nodes sit on a cycle
        indegree = {i: 0 for i in ids}
        for e in self.edges:
            indegree[e.dst] += 1
        queue = deque(i for i in ids if indegree[i] == 0)
        seen = 0
        while queue:
            node = queue.popleft()
            seen += 1
            for e in self.edges:
                if e.src == node:
                    indegree[e.dst] -= 1
                    if indegree[e.dst] == 0:
                        queue.append(e.dst)
        if seen != len(ids):
            raise ValueError("dependency edges must form a DAG")
        return self

    @property
    def ids(self) -> list[str]:
        """Object ids in scene order."""
        return [o.id for o in self.objects]

    def get(self, object_id: str) -> SceneObject:
        """Object by id; unknown ids raise SceneError."""
        try:
            return next(o for o in self.objects if o.id == object_id)
        except StopIteration:
            raise SceneError(f"unknown object id {object_id!r}") from None

    def resolve(self, ref: str) -> str:
        """Id of the object named or identified by ``ref``."""
        if ref in self.ids:
            return ref
        for o in self.objects:
            if o.name.lower() == ref.strip().lower():
                return o.id
        raise SceneError(f"no object with id or name {ref!r}")

    def children(self, object_id: str) -> list[SceneEdge]:
        """Outgoing dependency edges of an object."""
        return [e for e in self.edges if e.src == object_id]

    def without(self, ids: set[str]) -> "SceneGraph":
        """Scene constructed without ``ids`` and every edge touching them."""
        for i in ids:
            self.get(i)
        return SceneGraph(
            objects=[o for o in self.objects if o.id not in ids],
            edges=[e for e in self.edges if e.src not in ids and e.dst not in ids],
            canvas=self.canvas,
        )


def closure(scene: SceneGraph, targets: set[str]) -> set[str]:
    """Smallest superset of ``targets`` closed under outgoing dependency edges."""
    known = set(scene.ids)
    for t in targets:
        if t not in known:
            scene.get(t)
    adjacency: dict[str, list[str]] = {}
    for edge in scene.edges:
        adjacency.setdefault(edge.src, []).append(edge.dst)
    result = set(targets)
    queue = deque(targets)
    while queue:
        for dst in adjacency.get(queue.popleft(), ()):
            if dst not in result:
                result.add(dst)
                queue.append(dst)
    return result


def closure_kinds(scene: SceneGraph, targets: set[str]) -> set[InteractionKind]:
    """Interaction kinds of every edge the closure walks."""
    reached = closure(scene, targets)
    return {e.kind for e in scene.edges if e.src in reached and e.dst in reached}


# ---------------------------------------------------
# Rendering
# ---------------------------------------------------
def footprint(obj: SceneObject, canvas: Canvas) -> np.ndarray:
    """Boolean H×W array of the pixels an object covers."""
    x, y = obj.position
    w, h = obj.size
    out = np.zeros((canvas.height, canvas.width), dtype=bool)
    if obj.shape == "rect":
        out[y : y + h, x : x + w] = True
        return out
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inside = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    out[y : y + h, x : x + w] = inside
    return out


def footprint_mask(scene: SceneGraph, object_id: str) -> Mask:
    """Footprint of one object as a mask."""
    return Mask(footprint(scene.get(object_id), scene.canvas))


def render(scene: SceneGraph, removed: set[str] | frozenset[str] = frozenset()) -> Image:
    """Draw every object not in ``removed`` over the background."""
    for i in removed:
        scene.get(i)
    canvas = scene.canvas
    pixels = np.empty((canvas.height, canvas.width, 3), dtype=np.uint8)
    pixels[...] = canvas.background
    for obj in scene.objects:
        if obj.id not in removed:
            pixels[footprint(obj, canvas)] = obj.color
    return Image(pixels)


def present_objects(scene: SceneGraph, image: Image) -> list[str]:
    """Ids of objects with at least one footprint pixel still in their own color."""
    if image.size != (scene.canvas.width, scene.canvas.height):
        raise SceneError(f"image {image.size} does not match canvas")
    present = []
    for obj in scene.objects:
        region = image.pixels[footprint(obj, scene.canvas)]
        if (region == np.asarray(obj.color, dtype=np.uint8)).all(axis=1).any():
            present.append(obj.id)
    return present


# ---------------------------------------------------
# Generation
# ---------------------------------------------------
def _dependent_name(parent: str, kind: InteractionKind, taken: set[str]) -> str | None:
    if kind is not InteractionKind.LIGHTING_DEPENDENT:
        return None
    for suffix in ("shadow", "reflection"):
        name = f"{parent}'s {suffix}"
        if name not in taken:
            return name
    return None


def gen_scene(seed: int, n_objects: int, edge_density: float) -> SceneGraph:
    """Deterministic random scene; list order is the topological order of the DAG."""
    if n_objects < 1:
        raise SceneError("n_objects must be >= 1")
    if not 0.0 <= edge_density <= 1.0:
        raise SceneError("edge_density must be in [0, 1]")
    if n_objects > len(PALETTE) * len(NOUNS):
        raise SceneError(f"at most {len(PALETTE) * len(NOUNS)} objects are supported")

    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_objects))
    rows = math.ceil(n_objects / cols)
    canvas = Canvas(width=cols * CELL, height=rows * CELL)
    cells = rng.permutation(cols * rows)[:n_objects]

    kinds = list(InteractionKind)
    edges: list[SceneEdge] = []
    first_parent: dict[int, tuple[int, InteractionKind]] = {}
    for j in range(n_objects):
        for i in range(j):
            if rng.random() < edge_density:
                kind = kinds[int(rng.integers(len(kinds)))]
                edges.append(SceneEdge(src=f"o{i}", dst=f"o{j}", kind=kind))
                first_parent.setdefault(j, (i, kind))

    names = [f"{c} {n}" for c in PALETTE for n in NOUNS]
    name_order = rng.permutation(len(names))
    taken: set[str] = set()
    objects: list[SceneObject] = []
    for j in range(n_objects):
        w, h = (int(v) for v in rng.integers(MIN_SIDE, MAX_SIDE + 1, size=2))
        col, row = divmod(int(cells[j]), rows)
        x = col * CELL + int(rng.integers(CELL_MARGIN, CELL - CELL_MARGIN - w + 1))
        y = row * CELL + int(rng.integers(CELL_MARGIN, CELL - CELL_MARGIN - h + 1))
        shape: Literal["rect", "ellipse"] = "rect" if rng.random() < 0.5 else "ellipse"

        name = None
        if j in first_parent:
            parent, kind = first_parent[j]
            name = _dependent_name(objects[parent].name, kind, taken)
        if name is not None:
            color = SHADOW_GRAY if name.endswith("shadow") else REFLECTION_GRAY
            shape = "ellipse"
        else:
            name = next(names[k] for k in name_order if names[k] not in taken)
            color = PALETTE[name.split()[0]]
        taken.add(name)
        objects.append(
            SceneObject(id=f"o{j}", name=name, shape=shape, color=color, position=(x, y), size=(w, h))
        )

    return SceneGraph(objects=objects, edges=edges, canvas=canvas)


def instructions_for(scene: SceneGraph) -> list[tuple[str, str]]:
    """One single-object removal instruction per object: (id, instruction)."""
    return [(o.id, f"Remove the {o.name}.") for o in scene.objects]


def find_mentions(scene: SceneGraph, text: str) -> list[str]:
    """Ids of objects named in ``text``, longest names first, in order of appearance."""
    spans: list[tuple[int, int, str]] = []
    for obj in sorted(scene.objects, key=lambda o: len(o.name), reverse=True):
        for m in re.finditer(rf"(?<!\w){re.escape(obj.name)}(?!\w)", text, re.IGNORECASE):
            if all(m.end() <= s or m.start() >= e for s, e, _ in spans):
                spans.append((m.start(), m.end(), obj.id))
    seen: list[str] = []
    for _, _, oid in sorted(spans):
        if oid not in seen:
            seen.append(oid)
    return seen


def load_scene(path: str | Path) -> SceneGraph:
    """Read a scene JSON document."""
    try:
        return SceneGraph.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise SceneError(f"cannot load scene {path}: {e}") from e


def save_scene(scene: SceneGraph, path: str | Path) -> Path:
    """Write a scene as indented JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path
