"""Prometheus metrics definitions for pipeline and backend monitoring."""

from pathlib import Path

from prometheus_client import REGISTRY, Counter, Histogram, write_to_textfile

backend_calls = Counter("reorm_backend_calls_total", "Backend requests", ["kind", "outcome"])
backend_call_seconds = Histogram("reorm_backend_call_seconds", "Backend call duration seconds", ["kind", "locality"])
backend_retries = Counter("reorm_backend_retries_total", "Retried backend requests", ["kind"])
fixture_misses = Counter("reorm_fixture_misses_total", "Replay lookups with no recorded response", ["kind"])
malformed_responses = Counter("reorm_malformed_responses_total", "Unparseable reasoner responses", ["role"])
pipeline_runs = Counter("reorm_pipeline_runs_total", "Pipeline runs", ["mode", "outcome"])
corrective_passes = Counter("reorm_corrective_passes_total", "Second removal passes driven by the examiner")
bench_entries = Counter("reorm_bench_entries_total", "Benchmark entries processed", ["status"])


def write_metrics(path: str | Path) -> None:
    """Dump the default registry in Prometheus text format."""
    write_to_textfile(str(path), REGISTRY)
