"""Pydantic schemas for plans, prompts, configuration and run records."""

from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from reorm.raster import Image, Mask


class InteractionKind(StrEnum):
    """How an associated element depends on the object it interacts with."""

    LIGHTING_DEPENDENT = "lighting_dependent"
    PHYSICALLY_CONNECTED = "physically_connected"
    TARGET_PRODUCED = "target_produced"
    CONTEXTUALLY_LINKED = "contextually_linked"


class PromptRole(StrEnum):
    """Which reasoner stage a prompt belongs to."""

    ANALYZER = "analyzer"
    SIMULATOR = "simulator"
    EXAMINER = "examiner"
    IDENTIFY_TARGET = "identify_target"
    ENUMERATE_ELEMENTS = "enumerate_elements"
    REASON_CONSISTENCY = "reason_consistency"
    CONSOLIDATE_LIST = "consolidate_list"


class ChainStep(StrEnum):
    """Sub-steps of the prompt-chained analysis."""

    IDENTIFY_TARGET = "identify_target"
    ENUMERATE_ELEMENTS = "enumerate_elements"
    REASON_CONSISTENCY = "reason_consistency"
    CONSOLIDATE_LIST = "consolidate_list"

    @property
    def role(self) -> PromptRole:
        """Prompt role rendered for this step."""
        return PromptRole(self.value)


class PromptBundle(BaseModel):
    """Backend-ready prompt: system text, user turn and whether an image goes along."""

    model_config = ConfigDict(frozen=True)

    role: PromptRole
    system_text: str = Field(..., min_length=1)
    user_text: str
    attach_image: bool

    def request_body(self) -> dict[str, Any]:
        """Image-free canonical body used for request hashing."""
        return {"system": self.system_text, "user": self.user_text, "attach_image": self.attach_image}


class RemovalPlan(BaseModel):
    """Reasoning text plus the consolidated list of targets and associated elements."""

    model_config = ConfigDict(frozen=True)

    reasoning: str = ""
    labels: list[str]

    @field_validator("labels")
    @classmethod
    def _no_blank_labels(cls, v: list[str]) -> list[str]:
        if any(not label.strip() for label in v):
            raise ValueError("labels must be non-empty phrases")
        return v


class CorrectionList(BaseModel):
    """Examiner output; an empty list means the edit matches the description."""

    model_config = ConfigDict(frozen=True)

    reasoning: str = ""
    labels: list[str] = Field(default_factory=list)


class SceneDescription(BaseModel):
    """Simulator output: the expected post-removal scene."""

    model_config = ConfigDict(frozen=True)

    text: str = Field(..., min_length=1)


class PipelineMode(StrEnum):
    """Analysis and correction layout of a run."""

    CLOUD_FULL = "cloud_full"
    CLOUD_NO_CORRECTION = "cloud_no_correction"
    LOCAL_CHAIN = "local_chain"
    ABLATION_A = "ablation_a"  # single prompt, vision reasoner only
    ABLATION_B = "ablation_b"  # chained steps, vision reasoner only

    @property
    def chained(self) -> bool:
        """True when analysis runs as the four-step chain."""
        return self in (PipelineMode.LOCAL_CHAIN, PipelineMode.ABLATION_B)


class PipelineConfig(BaseModel):
    """Pipeline knobs. Only cloud_full runs the self-correction pass."""

    mode: PipelineMode = PipelineMode.CLOUD_FULL
    retries_on_malformed: int = Field(2, ge=0)
    mask_dilate_radius: int = Field(8, ge=0)
    segmenter_score_threshold: float = Field(0.3, ge=0.0, le=1.0)
    max_parallel_requests: int = Field(4, ge=1)
    self_correction: bool = True
    # drop correction instances that fall outside the first-pass mask neighborhood
    conservative_examiner: bool = False
    conservative_margin: int = Field(16, ge=0)

    @model_validator(mode="after")
    def _correction_only_in_cloud_full(self) -> "PipelineConfig":
        if self.mode != PipelineMode.CLOUD_FULL and self.self_correction:
            object.__setattr__(self, "self_correction", False)
        return self


class TsneParams(BaseModel):
    """t-SNE hyperparameters; learning_rate None means max(N/12, 50)."""

    perplexity: float = Field(30.0, gt=0)
    iterations: int = Field(1000, ge=1)
    early_exaggeration: float = Field(12.0, gt=0)
    exaggeration_iterations: int = Field(250, ge=0)
    learning_rate: float | None = Field(None, gt=0)
    momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0
    log_every: int = Field(50, ge=1)


class StageTiming(BaseModel):
    """Wall seconds of one stage split by where the work ran."""

    remote: float = Field(0.0, ge=0)
    local: float = Field(0.0, ge=0)

    @property
    def total(self) -> float:
        """remote + local."""
        return self.remote + self.local


class RunRecord(BaseModel):
    """Everything one pipeline run produced. Rasters are kept out of the JSON dump."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    input_digest: str
    instruction: str
    mode: PipelineMode
    plan: RemovalPlan
    description: SceneDescription | None = None
    correction: CorrectionList | None = None
    timing: dict[str, StageTiming] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)
    removal_mask: Mask | None = Field(None, exclude=True)
    first_pass: Image | None = Field(None, exclude=True)
    final: Image | None = Field(None, exclude=True)

    def total_timing(self) -> StageTiming:
        """Sum of all stage buckets."""
        return StageTiming(
            remote=sum(t.remote for t in self.timing.values()),
            local=sum(t.local for t in self.timing.values()),
        )


class MetricSet(BaseModel):
    """Image-pair quality metrics; neural scores are absent without a provider."""

    dino: float | None = Field(None, ge=-1.0, le=1.0)
    lpips: float | None = Field(None, ge=0.0)
    psnr: float
    ssim: float = Field(..., ge=-1.0, le=1.0)
