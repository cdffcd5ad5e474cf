"""Command-line entry point: run, bench, oracle, diversity, record and serve.

Exit codes: 0 on success, 1 when a run or some batch entries fail, 2 on
invocation or configuration errors.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

from reorm.backends.base import BackendSet
from reorm.backends.http_backend import http_backends
from reorm.backends.replay_backend import FixtureStore, fixture_backends
from reorm.config import APP_VERSION, RunConfig, apply_overrides, get_settings, load_run_config
from reorm.errors import ConfigError, DiversityError, ManifestError, ReormError, SceneError, StageError
from reorm.logging_conf import setup_logging
from reorm.metrics import write_metrics
from reorm.oracle.backends import oracle_backends
from reorm.oracle.scene import (
    closure,
    closure_kinds,
    gen_scene,
    instructions_for,
    load_scene,
    render,
    save_scene,
)
from reorm.raster import load_image, save_image
from reorm.schemas import PipelineMode
from reorm.services.bench_service import (
    ImageSource,
    ManifestEntry,
    format_runtime,
    load_manifest,
    run_ablation,
    run_bench,
)
from reorm.services.diversity_service import run_diversity
from reorm.services.pipeline_service import run_pipeline, save_run
from reorm.startup_validation import run_all_startup_validations

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# invocation problems, as opposed to run failures
USAGE_ERRORS = (ConfigError, ManifestError, SceneError, DiversityError)


# ---------------------------------------------------
# Parser
# ---------------------------------------------------
def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (pipeline, backends, tsne sections)")
    common.add_argument("--log-level", help="Override LOG_LEVEL for this invocation")
    return common


def _pipeline_parser() -> argparse.ArgumentParser:
    flags = argparse.ArgumentParser(add_help=False)
    group = flags.add_argument_group("pipeline overrides")
    group.add_argument("--mode", choices=[m.value for m in PipelineMode], help="Pipeline layout")
    group.add_argument(
        "--no-self-correction",
        dest="self_correction",
        action="store_const",
        const=False,
        help="Skip the simulate-and-examine pass",
    )
    group.add_argument(
        "--conservative-examiner",
        action="store_const",
        const=True,
        help="Keep corrective masks near the first removal mask",
    )
    group.add_argument("--retries", dest="retries_on_malformed", type=int, help="Re-prompts on malformed responses")
    group.add_argument("--dilate", dest="mask_dilate_radius", type=int, help="Mask dilation radius in pixels")
    group.add_argument(
        "--score-threshold", dest="segmenter_score_threshold", type=float, help="Minimum segment score"
    )
    group.add_argument("--max-parallel", dest="max_parallel_requests", type=int, help="Concurrent entries/requests")

    group = flags.add_argument_group("backend overrides")
    group.add_argument("--backends", dest="backends_kind", choices=["http", "oracle", "replay"], help="Backend family")
    group.add_argument("--scene", dest="backends_scene", type=Path, help="Oracle scene JSON")
    group.add_argument("--faulty-object", dest="backends_faulty_object", help="Object the oracle remover leaves in")
    group.add_argument(
        "--simulator-omit",
        dest="backends_simulator_omits",
        action="append",
        help="Object the oracle simulator leaves out of its description (repeatable)",
    )
    group.add_argument(
        "--fixtures", dest="backends_fixtures", type=Path, help="Replay fixtures (implies --backends replay)"
    )
    return flags


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with every subcommand."""
    common = _common_parser()
    pipeline = _pipeline_parser()
    parser = argparse.ArgumentParser(
        prog="reorm",
        description="Instruction-driven object removal that keeps the scene consistent.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 success, 1 run/entry failure, 2 invocation or config error.",
    )
    parser.add_argument("--version", action="version", version=APP_VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common, pipeline], help="Edit one image")
    p.add_argument("--image", type=Path, required=True, help="Input PNG")
    p.add_argument("--instruction", required=True, help='Removal instruction, e.g. "Remove the dog."')
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("bench", parents=[common, pipeline], help="Evaluate a manifest and write the report")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines benchmark manifest")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--ablation", action="store_true", help="Run the three local-deployment layouts")

    p = sub.add_parser("record", parents=[common, pipeline], help="Run a manifest live and record fixtures")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines benchmark manifest")
    p.add_argument("--out", type=Path, required=True, help="Output directory; fixtures go to OUT/fixtures.jsonl")
    p.add_argument("--ablation", action="store_true", help="Record the three local-deployment layouts")

    p = sub.add_parser("oracle", parents=[common], help="Generate a synthetic scene with ground truth")
    p.add_argument("--seed", type=int, default=0, help="Generator seed")
    p.add_argument("--n", type=int, default=6, help="Number of objects")
    p.add_argument("--density", type=float, default=0.3, help="Edge probability per object pair")
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("diversity", parents=[common], help="PCA and t-SNE over two embedding sets")
    p.add_argument("--embeddings", type=Path, nargs=2, required=True, metavar=("A", "B"), help="Embedding files")
    p.add_argument("--seed", type=int, default=0, help="Subsampling and t-SNE seed")
    p.add_argument("--perplexity", type=float, help="t-SNE perplexity")
    p.add_argument("--iterations", type=int, help="t-SNE iterations")
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("serve", parents=[common], help="Serve an oracle scene over HTTP")
    p.add_argument("--scene", type=Path, required=True, help="Scene JSON")
    p.add_argument("--host", default="127.0.0.1", help="Bind address")
    p.add_argument("--port", type=int, default=8080, help="Bind port")
    p.add_argument("--faulty-object", help="Object the primary remover leaves in")
    p.add_argument("--simulator-omit", action="append", help="Object the simulator leaves out (repeatable)")
    return parser


# ---------------------------------------------------
# Backends
# ---------------------------------------------------
def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File config with flag values layered on top."""
    cfg = load_run_config(args.config)
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "mode",
            "self_correction",
            "conservative_examiner",
            "retries_on_malformed",
            "mask_dilate_radius",
            "segmenter_score_threshold",
            "max_parallel_requests",
            "backends_kind",
            "backends_scene",
            "backends_faulty_object",
            "backends_simulator_omits",
            "backends_fixtures",
        )
    }
    if overrides["backends_fixtures"] is not None and overrides["backends_kind"] is None:
        overrides["backends_kind"] = "replay"
    return apply_overrides(cfg, **overrides)


def build_backends(cfg: RunConfig, scene_path: Path | None = None) -> BackendSet:
    """Backend set for the configured family; ``scene_path`` is the fallback oracle scene."""
    backends = cfg.backends
    if backends.kind == "http":
        return http_backends(max_parallel=cfg.pipeline.max_parallel_requests)
    if backends.kind == "oracle":
        path = backends.scene or scene_path
        if path is None:
            raise ConfigError("oracle backends need a scene (config, --scene or manifest entry)")
        return oracle_backends(load_scene(path), backends.faulty_object, backends.simulator_omits)
    if backends.fixtures is None:
        raise ConfigError("replay backends need --fixtures")
    return fixture_backends(FixtureStore(backends.fixtures, "replay"))


def _backends_for_manifest(
    cfg: RunConfig, wrap: Callable[[BackendSet], BackendSet] | None = None
) -> BackendSet | Callable[[ManifestEntry], BackendSet]:
    wrap = wrap or (lambda b: b)
    if cfg.backends.kind == "oracle" and cfg.backends.scene is None:
        return lambda entry: wrap(build_backends(cfg, entry.scene))
    return wrap(build_backends(cfg))


def _close(backends: BackendSet | Callable[[ManifestEntry], BackendSet]) -> None:
    if isinstance(backends, BackendSet):
        backends.close()


def _evaluate(
    args: argparse.Namespace,
    cfg: RunConfig,
    manifest: list[ManifestEntry],
    backends: BackendSet | Callable[[ManifestEntry], BackendSet],
) -> bool:
    """Single bench or the ablation sweep; True when any entry failed."""
    if args.ablation:
        reports = run_ablation(manifest, backends, cfg.pipeline, args.out, cfg.echo())
        print(f"ablation: {args.out / 'ablation.md'}")
        return any(r.any_failed for r in reports.values())
    report = run_bench(manifest, backends, cfg.pipeline, args.out, cfg.echo())
    print(f"report: {args.out / 'report.md'} ({report.counts.ok} ok, {report.counts.failed} failed)")
    return report.any_failed


# ---------------------------------------------------
# Commands
# ---------------------------------------------------
def cmd_run(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Edit one image and print the plan and timing."""
    if not args.image.is_file():
        raise ConfigError(f"image not found: {args.image}")
    image = load_image(args.image)
    with build_backends(cfg) as backends:
        try:
            record = run_pipeline(image, args.instruction, backends, cfg.pipeline, cfg.echo())
        except StageError as e:
            print(f"failed in {e.stage}: {e.cause}", file=sys.stderr)
            return EXIT_FAILED
    paths = save_run(record, args.out)
    print(f"labels: {json.dumps(record.plan.labels, ensure_ascii=False)}")
    print(f"runtime: {format_runtime(record.total_timing())} s")
    print(f"output: {paths['final']}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Evaluate a manifest; exit 1 when any entry failed."""
    manifest = load_manifest(args.manifest)
    backends = _backends_for_manifest(cfg)
    try:
        any_failed = _evaluate(args, cfg, manifest, backends)
    finally:
        _close(backends)
    write_metrics(args.out / "metrics.prom")
    return EXIT_FAILED if any_failed else EXIT_OK


def cmd_record(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Run a manifest against live backends, persisting every request/response pair."""
    if cfg.backends.kind == "replay":
        raise ConfigError("record needs live backends (http or oracle), not replay")
    manifest = load_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    store = FixtureStore(args.out / "fixtures.jsonl", "record")
    backends = _backends_for_manifest(cfg, lambda inner: fixture_backends(store, inner))
    try:
        any_failed = _evaluate(args, cfg, manifest, backends)
    finally:
        _close(backends)
    write_metrics(args.out / "metrics.prom")
    print(f"fixtures: {store.path} ({len(store)} records)")
    return EXIT_FAILED if any_failed else EXIT_OK


def cmd_oracle(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Write a generated scene, its render, per-target ground truth and a bench manifest."""
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if not 0.0 <= args.density <= 1.0:
        raise ConfigError("--density must be in [0, 1]")
    scene = gen_scene(args.seed, args.n, args.density)
    out: Path = args.out
    (out / "gt").mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene.json")
    save_image(render(scene), out / "render.png")

    closures: dict[str, list[str]] = {}
    lines = []
    for object_id, instruction in instructions_for(scene):
        reach = closure(scene, {object_id})
        closures[object_id] = [i for i in scene.ids if i in reach]
        save_image(render(scene, reach), out / "gt" / f"{object_id}.png")
        entry = ManifestEntry(
            id=f"s{args.seed}-{object_id}",
            input_image=Path("render.png"),
            instruction=instruction,
            ground_truth=Path("gt") / f"{object_id}.png",
            categories=sorted(closure_kinds(scene, {object_id})),
            source=ImageSource.SYNTHETIC,
            scene=Path("scene.json"),
        )
        lines.append(entry.model_dump_json(exclude_none=True))
    (out / "closures.json").write_text(json.dumps(closures, indent=2) + "\n", encoding="utf-8")
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"scene: {out / 'scene.json'} ({len(scene.objects)} objects, {len(scene.edges)} edges)")
    return EXIT_OK


def cmd_diversity(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Diversity analysis of two embedding sets."""
    update: dict[str, Any] = {"seed": args.seed}
    if args.perplexity is not None:
        update["perplexity"] = args.perplexity
    if args.iterations is not None:
        update["iterations"] = args.iterations
    params = cfg.tsne.model_copy(update=update)
    paths = run_diversity(args.embeddings[0], args.embeddings[1], args.out, args.seed, params)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace, cfg: RunConfig) -> int:
    """Serve an oracle scene with uvicorn until interrupted."""
    import uvicorn

    from reorm.server import create_oracle_app

    app = create_oracle_app(load_scene(args.scene), args.faulty_object, args.simulator_omit)
    uvicorn.run(app, host=args.host, port=args.port, log_config=None)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "run": cmd_run,
    "bench": cmd_bench,
    "record": cmd_record,
    "oracle": cmd_oracle,
    "diversity": cmd_diversity,
    "serve": cmd_serve,
}
VALIDATED = {"run", "bench", "record"}


def main(argv: list[str] | None = None) -> int:
    """Parse ``argv``, dispatch, and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level or get_settings().LOG_LEVEL, command=args.command)
    try:
        cfg = resolve_config(args)
        if args.command in VALIDATED:
            run_all_startup_validations(cfg)
        return COMMANDS[args.command](args, cfg)
    except USAGE_ERRORS as e:
        logger.error("Invalid invocation", extra={"command": args.command, "error_type": type(e).__name__})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ReormError as e:
        logger.error("Command failed", extra={"command": args.command, "error_type": type(e).__name__})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
