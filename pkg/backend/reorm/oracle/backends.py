"""Ground-truth implementations of every backend interface for a scene graph."""

import logging

from reorm.backends.base import (
    BackendSet,
    Reasoner,
    Remover,
    Segmenter,
    SegmentInstance,
    SegmentResult,
    require_image_bundle,
    require_text_bundle,
)
from reorm.errors import PromptInputError
from reorm.oracle.scene import SceneGraph, closure, find_mentions, footprint, present_objects, render
from reorm.parsing import (
    format_analyzer_response,
    format_examiner_response,
    label_key,
    parse_labeled_list,
    parse_target_line,
)
from reorm.prompts import (
    ASSOCIATED_MARKER,
    ELEMENTS_MARKER,
    INSTRUCTION_MARKER,
    SIMULATOR_REQUEST_MARKER,
    TARGETS_MARKER,
    format_label_list,
)
from reorm.raster import Image, Mask
from reorm.schemas import CorrectionList, PromptBundle, PromptRole, RemovalPlan

logger = logging.getLogger(__name__)

ORACLE_SCORE = 0.99
REFUSAL = "I could not find the object mentioned in the instruction in this image."


def _resolve_labels(scene: SceneGraph, labels: list[str]) -> list[str]:
    by_key = {label_key(o.name): o.id for o in scene.objects}
    return [by_key[label_key(label)] for label in labels if label_key(label) in by_key]


def _after(text: str, marker: str) -> str:
    idx = text.find(marker)
    return text[idx + len(marker) :].strip() if idx >= 0 else text.strip()


class OracleReasoner(Reasoner):
    """Answers every reasoner prompt from the scene graph.

    ``simulator_omits`` names objects the Simulator leaves out of its
    description even though they survive the edit.
    """

    locality = "local"

    def __init__(self, scene: SceneGraph, simulator_omits: set[str] | None = None):
        self.scene = scene
        self.simulator_omits = {scene.resolve(ref) for ref in simulator_omits or ()}

    def vision_reason(self, bundle: PromptBundle, image: Image) -> str:
        """Answer a visual stage."""
        require_image_bundle(bundle)
        return self.answer(bundle.role, bundle.user_text, image)

    def text_reason(self, bundle: PromptBundle) -> str:
        """Answer a text-only stage."""
        require_text_bundle(bundle)
        return self.answer(bundle.role, bundle.user_text, None)

    def answer(self, role: PromptRole, user_text: str, image: Image | None) -> str:
        """Dispatch on the stage the prompt belongs to."""
        handlers = {
            PromptRole.ANALYZER: self._analyze,
            PromptRole.SIMULATOR: self._simulate,
            PromptRole.EXAMINER: self._examine,
            PromptRole.IDENTIFY_TARGET: self._identify_target,
            PromptRole.ENUMERATE_ELEMENTS: self._enumerate_elements,
            PromptRole.REASON_CONSISTENCY: self._reason_consistency,
            PromptRole.CONSOLIDATE_LIST: self._consolidate,
        }
        return handlers[role](user_text, image)

    def _visible(self, image: Image | None) -> list[str]:
        if image is None:
            raise PromptInputError("this stage needs the image")
        return present_objects(self.scene, image)

    def _name(self, object_id: str) -> str:
        return self.scene.get(object_id).name

    def _dependents_reasoning(self, targets: list[str], reached: list[str]) -> str:
        lines = [f"The instruction asks to remove the {', '.join(self._name(t) for t in targets)}."]
        for e in self.scene.edges:
            if e.src in reached and e.dst in reached:
                lines.append(
                    f"The {self._name(e.dst)} is {e.kind.value.replace('_', ' ')} on the {self._name(e.src)}, "
                    "so it must be removed as well."
                )
        if len(lines) == 1:
            lines.append("No other element interacts with it.")
        return " ".join(lines)

    # Single-prompt stages
    def _analyze(self, instruction: str, image: Image | None) -> str:
        visible = self._visible(image)
        targets = [t for t in find_mentions(self.scene, instruction) if t in visible]
        if not targets:
            return REFUSAL
        reach = closure(self.scene, set(targets))
        associated = [i for i in self.scene.ids if i in reach and i in visible and i not in targets]
        labels = [self._name(t) for t in targets] + [f"the {self._name(i)}" for i in associated]
        reasoning = self._dependents_reasoning(targets, [*targets, *associated])
        return format_analyzer_response(RemovalPlan(reasoning=reasoning, labels=labels))

    def _simulate(self, user_text: str, image: Image | None) -> str:
        visible = self._visible(image)
        removed = set(_resolve_labels(self.scene, parse_labeled_list(user_text, SIMULATOR_REQUEST_MARKER)))
        survivors = [i for i in visible if i not in removed and i not in self.simulator_omits]
        if survivors:
            listed = ", ".join(f'"{self._name(i)}"' for i in survivors)
            scene_text = f"After the removal the image shows {listed} on a plain background."
        else:
            scene_text = "After the removal the image shows only a plain background."
        return f'Reasoning: "The listed objects disappear; everything else stays in place."\n{scene_text}'

    def _examine(self, description: str, image: Image | None) -> str:
        visible = self._visible(image)
        residue = [i for i in visible if f'"{self._name(i)}"' not in description]
        reasoning = (
            "Every object in the image appears in the description."
            if not residue
            else "The image contains objects the description does not mention."
        )
        labels = [f"the {self._name(i)}" for i in residue]
        return format_examiner_response(CorrectionList(reasoning=reasoning, labels=labels))

    # Prompt chain
    def _identify_target(self, user_text: str, image: Image | None) -> str:
        mentions = find_mentions(self.scene, _after(user_text, INSTRUCTION_MARKER))
        if not mentions:
            return REFUSAL
        return f"Target: {self._name(mentions[0])}"

    def _enumerate_elements(self, user_text: str, image: Image | None) -> str:
        visible = self._visible(image)
        target = set(_resolve_labels(self.scene, [parse_target_line(user_text)]))
        elements = [self._name(i) for i in visible if i not in target]
        return f"Elements: {format_label_list(elements)}"

    def _reason_consistency(self, user_text: str, image: Image | None) -> str:
        target = _resolve_labels(self.scene, [parse_target_line(user_text)])
        elements = parse_labeled_list(user_text, ELEMENTS_MARKER)
        reach = closure(self.scene, set(target))
        inconsistent = [e for e in elements if set(_resolve_labels(self.scene, [e])) & (reach - set(target))]
        reasoning = (
            "Without the target these elements lose the object they depend on."
            if inconsistent
            else "Every element stays plausible without the target."
        )
        return f'Reasoning: "{reasoning}"\nInconsistent: {format_label_list(inconsistent)}'

    def _consolidate(self, user_text: str, image: Image | None) -> str:
        targets = parse_labeled_list(user_text, TARGETS_MARKER)
        associated = parse_labeled_list(user_text, ASSOCIATED_MARKER)
        plan = RemovalPlan(reasoning="Targets followed by their associated elements.", labels=targets + associated)
        return format_analyzer_response(plan)


class OracleSegmenter(Segmenter):
    """Exact footprints of visible objects whose name matches a label."""

    locality = "local"

    def __init__(self, scene: SceneGraph):
        self.scene = scene

    def segment(self, image: Image, labels: list[str]) -> SegmentResult:
        """Exact footprints of the visible objects whose name matches a label."""
        visible = set(present_objects(self.scene, image))
        instances: dict[str, list[SegmentInstance]] = {}
        for label in labels:
            instances[label] = [
                SegmentInstance(mask=Mask(footprint(self.scene.get(i), self.scene.canvas)), score=ORACLE_SCORE)
                for i in _resolve_labels(self.scene, [label])
                if i in visible
            ]
        return SegmentResult(instances=instances)


class OracleRemover(Remover):
    """Re-renders the scene without every visible object the mask fully covers.

    Objects in ``skip`` are left untouched, which models a remover that
    misses part of its mask.
    """

    locality = "local"

    def __init__(self, scene: SceneGraph, skip: set[str] | None = None):
        self.scene = scene
        self.skip = set(skip or ())

    def remove(self, image: Image, mask: Mask) -> Image:
        """Erase objects whose footprint the mask fully covers."""
        visible = present_objects(self.scene, image)
        covered = mask.data.astype(bool)
        removed_now = {
            i
            for i in visible
            if i not in self.skip and covered[footprint(self.scene.get(i), self.scene.canvas)].all()
        }
        absent = {i for i in self.scene.ids if i not in visible} | removed_now
        return render(self.scene, absent)


def oracle_backends(
    scene: SceneGraph,
    faulty_object: str | None = None,
    simulator_omits: list[str] | None = None,
) -> BackendSet:
    """Backend set served entirely from ``scene``.

    With ``faulty_object`` the primary remover leaves that object in place and
    an honest correction remover takes the second pass.
    """
    reasoner = OracleReasoner(scene, set(simulator_omits or ()))
    skip = {scene.resolve(faulty_object)} if faulty_object else set()
    logger.debug(
        "Oracle backends ready",
        extra={"objects": len(scene.objects), "faulty": sorted(skip), "omits": sorted(reasoner.simulator_omits)},
    )
    return BackendSet(
        vision_reasoner=reasoner,
        text_reasoner=reasoner,
        segmenter=OracleSegmenter(scene),
        remover=OracleRemover(scene, skip),
        correction_remover=OracleRemover(scene) if skip else None,
    )
