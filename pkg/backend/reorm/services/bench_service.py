"""Benchmark harness: manifest loading, batch evaluation and report emission."""

import json
import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from datetime import UTC, datetime
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from reorm.backends.base import BackendSet
from reorm.errors import ManifestError, ReormError, StageError
from reorm.metrics import bench_entries
from reorm.raster import load_image
from reorm.schemas import InteractionKind, MetricSet, PipelineConfig, PipelineMode, StageTiming
from reorm.services.pipeline_service import run_pipeline, save_run
from reorm.services.quality_service import METRIC_METADATA, compute_metric_set

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("dino", "lpips", "psnr", "ssim")
ABLATION_MODES = (PipelineMode.ABLATION_A, PipelineMode.ABLATION_B, PipelineMode.LOCAL_CHAIN)


class ImageSource(StrEnum):
    """Where a benchmark image came from."""

    PUBLIC_DATASET = "public_dataset"
    SYNTHETIC = "synthetic"
    COPY_PASTE = "copy_paste"


class ManifestEntry(BaseModel):
    """One benchmark case. ``scene`` points at an oracle scene that can serve it."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9._-]+$")
    input_image: Path
    instruction: str = Field(..., min_length=1)
    ground_truth: Path | None = None
    categories: list[InteractionKind] = Field(default_factory=list)
    source: ImageSource
    scene: Path | None = None


def _resolve(base: Path, p: Path | None) -> Path | None:
    if p is None or p.is_absolute():
        return p
    return base / p


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse and validate a JSON-lines manifest; paths are relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON: {e.msg}", line=lineno) from e
        try:
            entry = ManifestEntry.model_validate(raw)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ManifestError(problems, line=lineno) from e
        entry = entry.model_copy(
            update={
                "input_image": _resolve(base, entry.input_image),
                "ground_truth": _resolve(base, entry.ground_truth),
                "scene": _resolve(base, entry.scene),
            }
        )
        if entry.id in seen:
            raise ManifestError(f"duplicate id {entry.id!r}", line=lineno)
        for field in ("input_image", "ground_truth", "scene"):
            p = getattr(entry, field)
            if p is not None and not p.is_file():
                raise ManifestError(f"{field} file not found: {p}", line=lineno)
        seen.add(entry.id)
        entries.append(entry)
    return entries


# ---------------------------------------------------
# Report model
# ---------------------------------------------------
class EntryResult(BaseModel):
    """Outcome of one manifest entry. Wall-clock timing lives in the report's timing block."""

    id: str
    status: Literal["ok", "failed"]
    categories: list[InteractionKind]
    source: ImageSource
    has_ground_truth: bool
    labels: list[str] = Field(default_factory=list)
    metrics: MetricSet | None = None
    error_stage: str | None = None
    error: str | None = None


class Aggregate(BaseModel):
    """Arithmetic means over the included entries of a group."""

    count: int
    dino: float | None = None
    lpips: float | None = None
    psnr: float | None = None
    ssim: float | None = None


class CategoryStats(BaseModel):
    """Entries per interaction kind (multi-label counts once per kind) and per source."""

    total: int
    categories: dict[str, int]
    sources: dict[str, int]


class Counts(BaseModel):
    """Entry tallies."""

    total: int
    ok: int
    failed: int
    without_ground_truth: int
    included: int


class ReportTiming(BaseModel):
    """Wall-clock values; excluded when comparing reports across runs."""

    per_entry: dict[str, StageTiming] = Field(default_factory=dict)
    runtime_mean: StageTiming | None = None


class Report(BaseModel):
    """Benchmark report for one configuration."""

    mode: PipelineMode
    counts: Counts
    means: Aggregate
    by_category: dict[str, Aggregate]
    by_source: dict[str, Aggregate]
    distribution: CategoryStats
    entries: list[EntryResult]
    metric_metadata: dict[str, Any] = Field(default_factory=lambda: METRIC_METADATA)
    config: dict[str, Any] = Field(default_factory=dict)
    timing: ReportTiming = Field(default_factory=ReportTiming)
    generated_at: str = ""

    @property
    def any_failed(self) -> bool:
        """True when any entry failed."""
        return self.counts.failed > 0


def category_stats(entries: list[ManifestEntry]) -> CategoryStats:
    """Per-kind and per-source entry counts; every kind and source is listed."""
    categories = {k.value: 0 for k in InteractionKind}
    sources = {s.value: 0 for s in ImageSource}
    for entry in entries:
        for kind in set(entry.categories):
            categories[kind.value] += 1
        sources[entry.source.value] += 1
    return CategoryStats(total=len(entries), categories=categories, sources=sources)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(results: list[EntryResult]) -> Aggregate:
    """Means of each metric over the results that carry it."""
    metric_sets = [r.metrics for r in results if r.metrics is not None]
    values: dict[str, float | None] = {}
    for name in METRIC_FIELDS:
        values[name] = _mean([v for m in metric_sets if (v := getattr(m, name)) is not None])
    return Aggregate(count=len(metric_sets), **values)


def _included(result: EntryResult) -> bool:
    return result.status == "ok" and result.has_ground_truth and result.metrics is not None


def build_report(
    results: list[EntryResult],
    timings: dict[str, StageTiming],
    manifest: list[ManifestEntry],
    cfg: PipelineConfig,
    config_echo: dict[str, Any] | None = None,
) -> Report:
    """Assemble counts, means and breakdowns from per-entry results."""
    included = [r for r in results if _included(r)]
    by_category = {
        k.value: aggregate([r for r in included if k in r.categories])
        for k in InteractionKind
        if any(k in r.categories for r in included)
    }
    by_source = {
        s.value: aggregate([r for r in included if r.source == s])
        for s in ImageSource
        if any(r.source == s for r in included)
    }
    runtime = list(timings.values())
    return Report(
        mode=cfg.mode,
        counts=Counts(
            total=len(results),
            ok=sum(r.status == "ok" for r in results),
            failed=sum(r.status == "failed" for r in results),
            without_ground_truth=sum(not r.has_ground_truth for r in results),
            included=len(included),
        ),
        means=aggregate(included),
        by_category=by_category,
        by_source=by_source,
        distribution=category_stats(manifest),
        entries=results,
        config=config_echo if config_echo is not None else cfg.model_dump(mode="json"),
        timing=ReportTiming(
            per_entry=timings,
            runtime_mean=(
                StageTiming(
                    remote=sum(t.remote for t in runtime) / len(runtime),
                    local=sum(t.local for t in runtime) / len(runtime),
                )
                if runtime
                else None
            ),
        ),
        generated_at=datetime.now(UTC).isoformat(timespec="seconds"),
    )


# ---------------------------------------------------
# Batch evaluation
# ---------------------------------------------------
BackendsFor = Callable[[ManifestEntry], BackendSet]


def run_bench(
    manifest: list[ManifestEntry],
    backends: BackendSet | BackendsFor,
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    config_echo: dict[str, Any] | None = None,
) -> Report:
    """Run every entry through the pipeline, score it and build the report.

    Entry failures are recorded, never raised. Results keep manifest order.
    """
    backends_for: BackendsFor = backends if callable(backends) else (lambda _entry: backends)
    out = Path(out_dir) if out_dir is not None else None

    def run_entry(entry: ManifestEntry) -> tuple[EntryResult, StageTiming | None]:
        base = {
            "id": entry.id,
            "categories": entry.categories,
            "source": entry.source,
            "has_ground_truth": entry.ground_truth is not None,
        }
        try:
            entry_backends = backends_for(entry)
            image = load_image(entry.input_image)
            record = run_pipeline(image, entry.instruction, entry_backends, cfg, config_echo)
            metrics = None
            if entry.ground_truth is not None:
                metrics = compute_metric_set(
                    record.final, load_image(entry.ground_truth), entry_backends.embedder, entry_backends.scorer
                )
            if out is not None:
                save_run(record, out / "entries" / entry.id)
        except ReormError as e:
            stage = e.stage if isinstance(e, StageError) else "setup"
            bench_entries.labels(status="failed").inc()
            logger.error(
                "Benchmark entry failed",
                extra={"entry_id": entry.id, "stage": stage, "error_type": type(e).__name__},
            )
            return EntryResult(status="failed", error_stage=stage, error=str(e), **base), None
        except OSError as e:
            bench_entries.labels(status="failed").inc()
            logger.error("Benchmark entry failed", extra={"entry_id": entry.id, "stage": "io", "error": str(e)})
            return EntryResult(status="failed", error_stage="io", error=str(e), **base), None
        except Exception as e:
            bench_entries.labels(status="failed").inc()
            logger.exception("Benchmark entry crashed", extra={"entry_id": entry.id, "error_type": type(e).__name__})
            return EntryResult(status="failed", error_stage="internal", error=f"{type(e).__name__}: {e}", **base), None

        bench_entries.labels(status="ok").inc()
        return EntryResult(status="ok", labels=record.plan.labels, metrics=metrics, **base), record.total_timing()

    with ThreadPoolExecutor(max_workers=cfg.max_parallel_requests) as pool:
        outcomes = list(pool.map(run_entry, manifest))

    results = [r for r, _ in outcomes]
    timings = {r.id: t for r, t in outcomes if t is not None}
    report = build_report(results, timings, manifest, cfg, config_echo)
    if out is not None:
        write_report(report, out)
    logger.info(
        "Benchmark finished",
        extra={"mode": cfg.mode.value, "ok": report.counts.ok, "failed": report.counts.failed},
    )
    return report


# ---------------------------------------------------
# Report emission
# ---------------------------------------------------
def _fmt(value: float | None, digits: int) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def format_runtime(timing: StageTiming | None) -> str:
    """Seconds per image; remote time is shown as an "(API)" term when present."""
    if timing is None:
        return "-"
    if timing.remote > 0:
        return f"{timing.remote:.2f}(API) + {timing.local:.2f}"
    return f"{timing.local:.2f}"


def _metric_cells(agg: Aggregate) -> str:
    return f"{_fmt(agg.dino, 3)} | {_fmt(agg.lpips, 3)} | {_fmt(agg.psnr, 2)} | {_fmt(agg.ssim, 3)}"


def render_markdown(report: Report) -> str:
    """Markdown summary with the DINO/LPIPS/PSNR/SSIM/Runtime columns."""
    c = report.counts
    lines = [
        "# Benchmark report",
        "",
        f"Mode: `{report.mode.value}`. Entries: {c.total} (ok {c.ok}, failed {c.failed}, "
        f"without ground truth {c.without_ground_truth}); means over {c.included} included entries.",
        "",
        "| Method | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ | Runtime (s/img) |",
        "|---|---:|---:|---:|---:|---:|",
        f"| {report.mode.value} | {_metric_cells(report.means)} | {format_runtime(report.timing.runtime_mean)} |",
    ]
    for title, groups in (("Category", report.by_category), ("Source", report.by_source)):
        if not groups:
            continue
        lines += [
            "",
            f"## By {title.lower()}",
            "",
            f"| {title} | N | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ |",
            "|---|---:|---:|---:|---:|---:|",
        ]
        lines += [f"| {name} | {agg.count} | {_metric_cells(agg)} |" for name, agg in groups.items()]

    dist = report.distribution
    lines += ["", "## Distribution", "", "| Facet | Value | Count |", "|---|---|---:|"]
    lines += [f"| category | {k} | {n} |" for k, n in dist.categories.items()]
    lines += [f"| source | {k} | {n} |" for k, n in dist.sources.items()]

    failed = [r for r in report.entries if r.status == "failed"]
    if failed:
        lines += ["", "## Failures", "", "| Entry | Stage | Error |", "|---|---|---|"]
        lines += [f"| {r.id} | {r.error_stage} | {(r.error or '').replace('|', '/')} |" for r in failed]
    return "\n".join(lines) + "\n"


def write_report(report: Report, out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.json`` and ``report.md``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    md_path = out_dir / "report.md"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    md_path.write_text(render_markdown(report), encoding="utf-8")
    return {"json": json_path, "markdown": md_path}


# ---------------------------------------------------
# Local-deployment ablation
# ---------------------------------------------------
ABLATION_ROWS = {
    # mode: (label, MLLM, prompt chaining, LLM)
    PipelineMode.ABLATION_A: ("(a)", True, False, False),
    PipelineMode.ABLATION_B: ("(b)", True, True, False),
    PipelineMode.LOCAL_CHAIN: ("(c)", True, True, True),
}


def run_ablation(
    manifest: list[ManifestEntry],
    backends: BackendSet | BackendsFor,
    base_cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    config_echo: dict[str, Any] | None = None,
) -> dict[PipelineMode, Report]:
    """Run the three local-deployment layouts over the same manifest."""
    reports: dict[PipelineMode, Report] = {}
    out = Path(out_dir) if out_dir is not None else None
    for mode in ABLATION_MODES:
        cfg = PipelineConfig.model_validate({**base_cfg.model_dump(), "mode": mode, "self_correction": False})
        echo = {**(config_echo or {}), "pipeline": cfg.model_dump(mode="json")}
        reports[mode] = run_bench(manifest, backends, cfg, out / mode.value if out else None, echo)
    if out is not None:
        (out / "ablation.md").write_text(render_ablation_markdown(reports), encoding="utf-8")
    return reports


def render_ablation_markdown(reports: dict[PipelineMode, Report]) -> str:
    """One row per layout: which components it uses and its metric means."""
    mark = {True: "✓", False: "✗"}
    lines = [
        "| Exp. | MLLM | Prompt Chaining | LLM | DINO ↑ | LPIPS ↓ | PSNR ↑ | SSIM ↑ |",
        "|---|:---:|:---:|:---:|---:|---:|---:|---:|",
    ]
    for mode, report in reports.items():
        label, mllm, chain, llm = ABLATION_ROWS[mode]
        lines.append(f"| {label} | {mark[mllm]} | {mark[chain]} | {mark[llm]} | {_metric_cells(report.means)} |")
    return "\n".join(lines) + "\n"
