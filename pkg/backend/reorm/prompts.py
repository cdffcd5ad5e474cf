"""Render reasoner prompts from the versioned, checksummed prompt assets."""

import json
import logging
from functools import lru_cache
from importlib import resources

from reorm.errors import PromptAssetError, PromptInputError
from reorm.schemas import ChainStep, PromptBundle, PromptRole, RemovalPlan, SceneDescription
from reorm.util import sha256_hex

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"

ASSET_FILES: dict[PromptRole, str] = {
    PromptRole.ANALYZER: "analyzer.txt",
    PromptRole.SIMULATOR: "simulator.txt",
    PromptRole.EXAMINER: "examiner.txt",
    PromptRole.IDENTIFY_TARGET: "identify_target.txt",
    PromptRole.ENUMERATE_ELEMENTS: "enumerate_elements.txt",
    PromptRole.REASON_CONSISTENCY: "reason_consistency.txt",
    PromptRole.CONSOLIDATE_LIST: "consolidate_list.txt",
}

# Marker lines shared with the parser and the oracle world
SIMULATOR_REQUEST_MARKER = "Remove these objects:"
TARGET_MARKER = "Target:"
ELEMENTS_MARKER = "Elements:"
INCONSISTENT_MARKER = "Inconsistent:"
TARGETS_MARKER = "Targets:"
ASSOCIATED_MARKER = "Associated elements:"
INSTRUCTION_MARKER = "Instruction:"


def _asset_dir(version: str):
    return resources.files("reorm").joinpath("assets", "prompts", version)


@lru_cache
def load_prompt_assets(version: str = PROMPT_VERSION) -> dict[PromptRole, str]:
    """Load every prompt asset and verify it against the pinned SHA256SUMS."""
    root = _asset_dir(version)
    try:
        sums_text = root.joinpath("SHA256SUMS").read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise PromptAssetError(f"Prompt asset checksums missing for version {version}") from e

    expected: dict[str, str] = {}
    for line in sums_text.splitlines():
        if line.strip():
            digest, name = line.split(maxsplit=1)
            expected[name.strip().lstrip("*")] = digest

    prompts: dict[PromptRole, str] = {}
    for role, filename in ASSET_FILES.items():
        try:
            raw = root.joinpath(filename).read_bytes()
        except FileNotFoundError as e:
            raise PromptAssetError(f"Prompt asset {filename} missing") from e
        digest = sha256_hex(raw)
        if expected.get(filename) != digest:
            raise PromptAssetError(f"Prompt asset {filename} does not match its checksum")
        prompts[role] = raw.decode("utf-8")

    logger.debug("Loaded %d prompt assets (%s)", len(prompts), version)
    return prompts


def system_prompt(role: PromptRole) -> str:
    """Verbatim system text of a role."""
    return load_prompt_assets()[role]


def role_for_system_text(text: str) -> PromptRole | None:
    """Recognise the stage a wire-level system prompt belongs to."""
    for role, prompt in load_prompt_assets().items():
        if text == prompt:
            return role
    return None


def format_label_list(labels: list[str]) -> str:
    """Bracketed, double-quoted list as used in every response format."""
    return json.dumps(list(labels), ensure_ascii=False)


# ---------------------------------------------------
# Single-prompt stages
# ---------------------------------------------------
def render_analyzer(instruction: str) -> PromptBundle:
    """Analyzer prompt: the user turn is the instruction alone."""
    if not instruction or not instruction.strip():
        raise PromptInputError("instruction must not be empty")
    return PromptBundle(
        role=PromptRole.ANALYZER,
        system_text=system_prompt(PromptRole.ANALYZER),
        user_text=instruction,
        attach_image=True,
    )


def render_simulator(plan: RemovalPlan) -> PromptBundle:
    """Simulator prompt for the original image and the plan's labels."""
    if not plan.labels:
        raise PromptInputError("removal plan has no labels")
    return PromptBundle(
        role=PromptRole.SIMULATOR,
        system_text=system_prompt(PromptRole.SIMULATOR),
        user_text=f"{SIMULATOR_REQUEST_MARKER} {format_label_list(plan.labels)}",
        attach_image=True,
    )


def render_examiner(description: SceneDescription | str) -> PromptBundle:
    """Examiner prompt; the edited image goes along with the description."""
    text = description.text if isinstance(description, SceneDescription) else description
    if not text or not text.strip():
        raise PromptInputError("scene description must not be empty")
    return PromptBundle(
        role=PromptRole.EXAMINER,
        system_text=system_prompt(PromptRole.EXAMINER),
        user_text=text,
        attach_image=True,
    )


# ---------------------------------------------------
# Prompt chain (local deployment)
# ---------------------------------------------------
def consistency_context(target: str, elements: list[str]) -> str:
    """Context of the ReasonConsistency step."""
    return f"{TARGET_MARKER} {target}\n{ELEMENTS_MARKER} {format_label_list(elements)}"


def consolidate_context(targets: list[str], associated: list[str]) -> str:
    """Context of the ConsolidateList step."""
    return f"{TARGETS_MARKER} {format_label_list(targets)}\n{ASSOCIATED_MARKER} {format_label_list(associated)}"


def render_chain_step(step: ChainStep | str, context: str) -> PromptBundle:
    """Render one chain step. Only EnumerateElements looks at the image."""
    try:
        step = ChainStep(step)
    except ValueError as e:
        raise PromptInputError(f"unknown chain step {step!r}") from e
    if not context or not context.strip():
        raise PromptInputError(f"{step.value} needs the previous step's output")

    if step is ChainStep.IDENTIFY_TARGET:
        user_text = f"{INSTRUCTION_MARKER} {context}"
    elif step is ChainStep.ENUMERATE_ELEMENTS:
        user_text = f"{TARGET_MARKER} {context}"
    else:
        user_text = context

    return PromptBundle(
        role=step.role,
        system_text=system_prompt(step.role),
        user_text=user_text,
        attach_image=step is ChainStep.ENUMERATE_ELEMENTS,
    )
