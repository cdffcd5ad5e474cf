"""Removal pipeline: analysis, mask-guided removal and the self-correction pass."""

import logging
import time
from collections import defaultdict
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

from reorm.backends.base import BackendSet, Reasoner
from reorm.errors import (
    AnalysisFailed,
    ConfigError,
    DimensionMismatchError,
    MalformedResponse,
    NoMaskFound,
    PromptInputError,
    ReormError,
    StageError,
)
from reorm.metrics import backend_call_seconds, corrective_passes, malformed_responses, pipeline_runs
from reorm.parsing import (
    normalize_labels,
    parse_analyzer_response,
    parse_consolidated_list,
    parse_examiner_response,
    parse_labeled_list,
    parse_target_line,
)
from reorm.prompts import (
    ELEMENTS_MARKER,
    INCONSISTENT_MARKER,
    consistency_context,
    consolidate_context,
    render_analyzer,
    render_chain_step,
    render_examiner,
    render_simulator,
)
from reorm.raster import Image, Mask, mask_dilate, mask_union, save_image, save_mask
from reorm.schemas import (
    ChainStep,
    CorrectionList,
    PipelineConfig,
    PipelineMode,
    PromptRole,
    RemovalPlan,
    RunRecord,
    SceneDescription,
    StageTiming,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


class StageClock:
    """Wall time per stage, split into remote and local buckets.

    Backend calls made through ``call`` count as remote when the backend's
    locality is remote; everything else a stage spends is local.
    """

    def __init__(self):
        self._remote: dict[str, float] = defaultdict(float)
        self._wall: dict[str, float] = defaultdict(float)
        self._current = "other"

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Charge everything timed inside the block to ``name``."""
        previous, self._current = self._current, name
        start = time.perf_counter()
        try:
            yield
        finally:
            self._wall[name] += time.perf_counter() - start
            self._current = previous

    def call(self, backend: Any, kind: str, fn: Callable[..., T], *args: Any) -> T:
        """Run one backend call and attribute its wall time."""
        locality = getattr(backend, "locality", "local")
        start = time.perf_counter()
        try:
            return fn(*args)
        finally:
            elapsed = time.perf_counter() - start
            backend_call_seconds.labels(kind=kind, locality=locality).observe(elapsed)
            if locality == "remote":
                self._remote[self._current] += elapsed

    def timing(self) -> dict[str, StageTiming]:
        """Per-stage remote/local split."""
        return {
            name: StageTiming(remote=min(self._remote[name], wall), local=max(wall - self._remote[name], 0.0))
            for name, wall in self._wall.items()
        }


def _with_retries(attempt: Callable[[], T], retries: int, role: PromptRole) -> T:
    """Re-send an identical prompt while the response does not parse."""
    last: MalformedResponse | None = None
    for n in range(retries + 1):
        try:
            return attempt()
        except MalformedResponse as e:
            last = e
            malformed_responses.labels(role=role.value).inc()
            logger.warning(
                "Malformed reasoner response",
                extra={"role": role.value, "attempt": n + 1, "error": str(e)},
            )
    assert last is not None
    raise AnalysisFailed(
        f"{role.value} response unparseable after {retries + 1} attempts: {last}",
        attempts=retries + 1,
        last_response=last.text,
    )


# ---------------------------------------------------
# Analysis
# ---------------------------------------------------
def run_analysis(
    image: Image,
    instruction: str,
    backends: BackendSet,
    cfg: PipelineConfig,
    clock: StageClock | None = None,
) -> RemovalPlan:
    """Single-prompt analysis on the vision reasoner."""
    clock = clock or StageClock()
    bundle = render_analyzer(instruction)
    reasoner = backends.vision_reasoner

    def attempt() -> RemovalPlan:
        text = clock.call(reasoner, "vision_reason", reasoner.vision_reason, bundle, image)
        return parse_analyzer_response(text)

    return _with_retries(attempt, cfg.retries_on_malformed, PromptRole.ANALYZER)


def run_local_chain(
    image: Image,
    instruction: str,
    backends: BackendSet,
    cfg: PipelineConfig,
    clock: StageClock | None = None,
) -> RemovalPlan:
    """Four-step chained analysis.

    Text-only steps go to the text reasoner, or to the vision reasoner in
    ``ablation_b``.
    """
    if not cfg.mode.chained:
        raise ConfigError(f"mode {cfg.mode.value} does not use the prompt chain")
    if not instruction or not instruction.strip():
        raise PromptInputError("instruction must not be empty")
    clock = clock or StageClock()
    vision = backends.vision_reasoner
    text: Reasoner = vision if cfg.mode is PipelineMode.ABLATION_B else backends.text_reasoner

    def ask(step: ChainStep, context: str, parse: Callable[[str], T]) -> T:
        bundle = render_chain_step(step, context)

        def attempt() -> T:
            if bundle.attach_image:
                raw = clock.call(vision, "vision_reason", vision.vision_reason, bundle, image)
            else:
                raw = clock.call(text, "text_reason", text.text_reason, bundle)
            return parse(raw)

        return _with_retries(attempt, cfg.retries_on_malformed, step.role)

    target = ask(ChainStep.IDENTIFY_TARGET, instruction, parse_target_line)
    elements = ask(
        ChainStep.ENUMERATE_ELEMENTS,
        target,
        lambda raw: normalize_labels(parse_labeled_list(raw, ELEMENTS_MARKER)),
    )
    inconsistent = ask(
        ChainStep.REASON_CONSISTENCY,
        consistency_context(target, elements),
        lambda raw: normalize_labels(parse_labeled_list(raw, INCONSISTENT_MARKER)),
    )
    plan = ask(ChainStep.CONSOLIDATE_LIST, consolidate_context([target], inconsistent), parse_consolidated_list)
    logger.debug(
        "Chained analysis finished",
        extra={"target": target, "elements": len(elements), "associated": inconsistent},
    )
    return plan


# ---------------------------------------------------
# Removal
# ---------------------------------------------------
def build_removal_mask(
    image: Image,
    labels: list[str],
    backends: BackendSet,
    cfg: PipelineConfig,
    clock: StageClock | None = None,
    allowed: Mask | None = None,
) -> Mask | None:
    """Union of every dilated above-threshold instance of ``labels``.

    ``allowed`` clips each instance; instances left empty are dropped.
    Returns None when nothing survives.
    """
    clock = clock or StageClock()
    segmenter = backends.segmenter
    result = clock.call(segmenter, "segment", segmenter.segment, image, labels).validate(image)

    masks: list[Mask] = []
    for label in labels:
        for inst in result.for_label(label):
            if inst.score < cfg.segmenter_score_threshold or inst.mask.is_empty():
                continue
            mask = mask_dilate(inst.mask, cfg.mask_dilate_radius)
            if allowed is not None:
                mask = mask.intersect(allowed)
                if mask.is_empty():
                    continue
            masks.append(mask)
    if not masks:
        return None
    return mask_union(masks, reference=image)


def _removal_pass(
    image: Image,
    plan: RemovalPlan,
    backends: BackendSet,
    cfg: PipelineConfig,
    clock: StageClock,
) -> tuple[Image, Mask]:
    if not plan.labels:
        raise PromptInputError("removal plan has no labels")
    mask = build_removal_mask(image, plan.labels, backends, cfg, clock)
    if mask is None:
        raise NoMaskFound(plan.labels)
    remover = backends.remover
    edited = clock.call(remover, "remove", remover.remove, image, mask)
    if edited.size != image.size:
        raise DimensionMismatchError(f"remover returned {edited.size}, expected {image.size}")
    return edited, mask


def run_removal(
    image: Image,
    plan: RemovalPlan,
    backends: BackendSet,
    cfg: PipelineConfig,
    clock: StageClock | None = None,
) -> Image:
    """Segment every plan label and remove the unioned mask in one remover call."""
    edited, _ = _removal_pass(image, plan, backends, cfg, clock or StageClock())
    return edited


# ---------------------------------------------------
# Self-correction
# ---------------------------------------------------
@dataclass(frozen=True)
class CorrectionResult:
    """Outcome of the verify-and-refine pass."""

    image: Image
    description: SceneDescription
    correction: CorrectionList
    corrected: bool


def _parse_description(text: str) -> SceneDescription:
    if not text or not text.strip():
        raise MalformedResponse("empty scene description", text)
    return SceneDescription(text=text.strip())


def run_self_correction(
    original: Image,
    edited: Image,
    plan: RemovalPlan,
    backends: BackendSet,
    cfg: PipelineConfig,
    first_mask: Mask | None = None,
    clock: StageClock | None = None,
) -> CorrectionResult:
    """Simulate the expected scene, examine the edit and run at most one corrective removal."""
    if not cfg.self_correction:
        raise ConfigError(f"self-correction is disabled for mode {cfg.mode.value}")
    clock = clock or StageClock()
    reasoner = backends.vision_reasoner

    sim_bundle = render_simulator(plan)
    description = _with_retries(
        lambda: _parse_description(
            clock.call(reasoner, "vision_reason", reasoner.vision_reason, sim_bundle, original)
        ),
        cfg.retries_on_malformed,
        PromptRole.SIMULATOR,
    )
    exam_bundle = render_examiner(description)
    correction = _with_retries(
        lambda: parse_examiner_response(
            clock.call(reasoner, "vision_reason", reasoner.vision_reason, exam_bundle, edited)
        ),
        cfg.retries_on_malformed,
        PromptRole.EXAMINER,
    )
    if not correction.labels:
        return CorrectionResult(edited, description, correction, corrected=False)

    allowed = None
    if cfg.conservative_examiner:
        if first_mask is None:
            logger.warning("Conservative examiner needs the first-pass mask; correcting unrestricted")
        else:
            allowed = mask_dilate(first_mask, cfg.conservative_margin)

    mask = build_removal_mask(edited, correction.labels, backends, cfg, clock, allowed=allowed)
    if mask is None:
        logger.warning(
            "Correction labels produced no mask; keeping first-pass result",
            extra={"labels": correction.labels, "conservative": cfg.conservative_examiner},
        )
        return CorrectionResult(edited, description, correction, corrected=False)

    remover = backends.remover_for_correction()
    corrective_passes.inc()
    corrected = clock.call(remover, "remove", remover.remove, edited, mask)
    if corrected.size != edited.size:
        raise DimensionMismatchError(f"remover returned {corrected.size}, expected {edited.size}")
    return CorrectionResult(corrected, description, correction, corrected=True)


# ---------------------------------------------------
# Full run
# ---------------------------------------------------
def run_pipeline(
    image: Image,
    instruction: str,
    backends: BackendSet,
    cfg: PipelineConfig,
    config_echo: dict[str, Any] | None = None,
) -> RunRecord:
    """Analysis per mode, removal, then the correction pass when enabled.

    Failures are re-raised as StageError naming the stage.
    """
    clock = StageClock()
    stage = "analysis"
    try:
        with clock.stage("analysis"):
            if cfg.mode.chained:
                plan = run_local_chain(image, instruction, backends, cfg, clock)
            else:
                plan = run_analysis(image, instruction, backends, cfg, clock)

        stage = "removal"
        with clock.stage("removal"):
            first_pass, mask = _removal_pass(image, plan, backends, cfg, clock)

        description = correction = None
        final = first_pass
        if cfg.self_correction:
            stage = "correction"
            with clock.stage("correction"):
                result = run_self_correction(image, first_pass, plan, backends, cfg, mask, clock)
            description, correction, final = result.description, result.correction, result.image
    except ReormError as e:
        pipeline_runs.labels(mode=cfg.mode.value, outcome="error").inc()
        logger.error(
            "Pipeline stage failed",
            extra={"stage": stage, "error_type": type(e).__name__, "error": str(e)},
        )
        raise StageError(stage, e) from e

    pipeline_runs.labels(mode=cfg.mode.value, outcome="success").inc()
    return RunRecord(
        input_digest=image.digest(),
        instruction=instruction,
        mode=cfg.mode,
        plan=plan,
        description=description,
        correction=correction,
        timing=clock.timing(),
        config=config_echo if config_echo is not None else cfg.model_dump(mode="json"),
        removal_mask=mask,
        first_pass=first_pass,
        final=final,
    )


def save_run(record: RunRecord, out_dir: str | Path, stem: str = "") -> dict[str, Path]:
    """Write the final image, intermediates and the record JSON into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"{stem}." if stem else ""
    paths: dict[str, Path] = {}
    if record.final is not None:
        paths["final"] = save_image(record.final, out_dir / f"{prefix}final.png")
    if record.first_pass is not None and record.description is not None:
        paths["first_pass"] = save_image(record.first_pass, out_dir / f"{prefix}first_pass.png")
    if record.removal_mask is not None:
        paths["mask"] = save_mask(record.removal_mask, out_dir / f"{prefix}mask.png")
    paths["record"] = out_dir / f"{prefix}record.json"
    paths["record"].write_text(record.model_dump_json(indent=2, exclude_none=True) + "\n", encoding="utf-8")
    return paths
