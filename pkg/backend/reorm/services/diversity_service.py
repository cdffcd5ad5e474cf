"""Dataset diversity analysis over precomputed image embeddings.

Covers ingestion (JSON-lines or the ``RMEB`` binary matrix), L2
normalization, size-matched subsampling, PCA explained variance and an
exact t-SNE with PCA initialization.
"""

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from reorm.errors import DiversityError
from reorm.schemas import TsneParams
from reorm.util import sha256_hex

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"RMEB"
BINARY_VERSION = 1
# magic, version, reserved, N, D, sha256(payload)
BINARY_HEADER = struct.Struct("<4sHHII32s")
THRESHOLDS = (0.90, 0.95)
PERPLEXITY_TOL = 1e-5
PERPLEXITY_TRIES = 50
MIN_GAIN = 0.01


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """N×D embedding matrix of one dataset."""

    label: str
    vectors: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DiversityError(f"{self.label}: embeddings must be a non-empty N×D matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DiversityError(f"{self.label}: embeddings contain NaN or Inf")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)
        ids = list(self.ids) or [str(i) for i in range(arr.shape[0])]
        if len(ids) != arr.shape[0]:
            raise DiversityError(f"{self.label}: {len(ids)} ids for {arr.shape[0]} vectors")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        """Number of rows."""
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        """Embedding dimension."""
        return int(self.vectors.shape[1])

    def take(self, indices: np.ndarray) -> "EmbeddingSet":
        """Rows at ``indices``, in that order."""
        return EmbeddingSet(self.label, self.vectors[indices], [self.ids[i] for i in indices])


# ---------------------------------------------------
# Ingestion
# ---------------------------------------------------
def _checksum_path(path: Path) -> Path:
    return path.with_name(path.name + ".sha256")


def load_embeddings_jsonl(path: str | Path, label: str | None = None) -> EmbeddingSet:
    """Read ``{id, vector}`` lines; a ``<file>.sha256`` sidecar is verified when present."""
    path = Path(path)
    raw = path.read_bytes()
    sidecar = _checksum_path(path)
    if sidecar.exists():
        expected = sidecar.read_text(encoding="utf-8").split()[0]
        if sha256_hex(raw) != expected:
            raise DiversityError(f"{path}: checksum mismatch")
    ids, rows = [], []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            ids.append(str(record["id"]))
            rows.append([float(x) for x in record["vector"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DiversityError(f"{path}: line {lineno}: invalid embedding record ({e})") from e
    if not rows:
        raise DiversityError(f"{path}: no embeddings")
    if len({len(r) for r in rows}) != 1:
        raise DiversityError(f"{path}: rows have different dimensions")
    return EmbeddingSet(label or path.stem, np.array(rows), ids)


def save_embeddings_jsonl(emb: EmbeddingSet, path: str | Path) -> Path:
    """Write JSON-lines plus the ``.sha256`` sidecar."""
    path = Path(path)
    lines = [json.dumps({"id": i, "vector": v.tolist()}) for i, v in zip(emb.ids, emb.vectors, strict=True)]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    path.write_bytes(data)
    _checksum_path(path).write_text(f"{sha256_hex(data)}  {path.name}\n", encoding="utf-8")
    return path


def load_embeddings_binary(path: str | Path, label: str | None = None) -> EmbeddingSet:
    """Read the little-endian ``RMEB`` matrix format."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < BINARY_HEADER.size:
        raise DiversityError(f"{path}: truncated header")
    magic, version, _, n, d, digest = BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise DiversityError(f"{path}: not an RMEB file")
    if version != BINARY_VERSION:
        raise DiversityError(f"{path}: unsupported RMEB version {version}")
    payload = raw[BINARY_HEADER.size :]
    if len(payload) != n * d * 8:
        raise DiversityError(f"{path}: payload holds {len(payload)} bytes, header says {n}×{d} float64")
    if sha256_hex(payload) != digest.hex():
        raise DiversityError(f"{path}: checksum mismatch")
    return EmbeddingSet(label or path.stem, np.frombuffer(payload, dtype="<f8").reshape(n, d))


def save_embeddings_binary(emb: EmbeddingSet, path: str | Path) -> Path:
    """Write the ``RMEB`` matrix format (ids are not stored)."""
    payload = np.ascontiguousarray(emb.vectors, dtype="<f8").tobytes()
    header = BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, 0, emb.n, emb.dim, bytes.fromhex(sha256_hex(payload)))
    path = Path(path)
    path.write_bytes(header + payload)
    return path


def load_embeddings(path: str | Path, label: str | None = None) -> EmbeddingSet:
    """Dispatch on the file content: ``RMEB`` magic or JSON-lines."""
    path = Path(path)
    if not path.is_file():
        raise DiversityError(f"embedding file not found: {path}")
    with path.open("rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return load_embeddings_binary(path, label)
    return load_embeddings_jsonl(path, label)


# ---------------------------------------------------
# Preprocessing
# ---------------------------------------------------
def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm."""
    norms = np.linalg.norm(emb.vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        row = int(zero[0])
        raise DiversityError(f"{emb.label}: row {row} (id {emb.ids[row]}) has zero norm")
    return EmbeddingSet(emb.label, emb.vectors / norms[:, None], emb.ids)


def subsample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    """First ``n`` entries of a seeded permutation of ``range(n_total)``."""
    return np.random.default_rng(seed).permutation(n_total)[:n]


def subsample_match(a: EmbeddingSet, b: EmbeddingSet, seed: int) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Subsample the larger set without replacement to the size of the smaller one."""
    if a.n == b.n:
        return a, b
    if a.n > b.n:
        return a.take(subsample_indices(a.n, b.n, seed)), b
    return a, b.take(subsample_indices(b.n, a.n, seed))


# ---------------------------------------------------
# PCA
# ---------------------------------------------------
def explained_variance_ratios(emb: EmbeddingSet) -> np.ndarray:
    """Sample-covariance eigenvalues (divisor N-1), descending, normalized to sum 1."""
    if emb.n < 2:
        raise DiversityError(f"{emb.label}: PCA needs at least 2 rows")
    x = emb.vectors
    if np.ptp(x, axis=0).max() == 0.0:
        raise DiversityError(f"{emb.label}: all rows are identical; total variance is zero")
    centered = x - x.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    eig = (singular**2) / (emb.n - 1)
    eig = eig[: min(emb.n - 1, emb.dim)]
    return eig / eig.sum()


def pca_explained_variance(emb: EmbeddingSet) -> np.ndarray:
    """Cumulative explained variance ratio; length min(N-1, D), last element 1."""
    return np.cumsum(explained_variance_ratios(emb))


def components_for(cumulative: np.ndarray | list[float], threshold: float) -> int:
    """Smallest k whose cumulative ratio reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise DiversityError(f"threshold must be in (0, 1], got {threshold}")
    cum = np.asarray(cumulative, dtype=np.float64)
    k = int(np.searchsorted(cum, threshold - 1e-12, side="left")) + 1
    return min(k, len(cum))


def _pca_project(x: np.ndarray, dims: int) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims]
    # sign convention: largest loading of each component is positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1.0
    proj = centered @ (comps * signs[:, None]).T
    if proj.shape[1] < dims:
        proj = np.hstack([proj, np.zeros((proj.shape[0], dims - proj.shape[1]))])
    return proj


# ---------------------------------------------------
# t-SNE
# ---------------------------------------------------
@dataclass(frozen=True, eq=False)
class TsneResult:
    """2-D layout plus the (iteration, KL divergence) checkpoints."""

    points: np.ndarray
    kl_trace: list[tuple[int, float]]


def _row_entropy(dist: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    shifted = dist - dist.min()
    weights = np.exp(-shifted * beta)
    total = weights.sum()
    probs = weights / total
    return float(np.log(total) + beta * np.sum(shifted * probs)), probs


def conditional_affinities(sq_dist: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches ``log(perplexity)``."""
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        others = np.concatenate((np.arange(i), np.arange(i + 1, n)))
        dist = sq_dist[i, others]
        beta, lo, hi = 1.0, -np.inf, np.inf
        entropy, probs = _row_entropy(dist, beta)
        for _ in range(PERPLEXITY_TRIES):
            diff = entropy - target
            if abs(diff) <= PERPLEXITY_TOL:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
            entropy, probs = _row_entropy(dist, beta)
        p[i, others] = probs
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def tsne(emb: EmbeddingSet, params: TsneParams | None = None) -> TsneResult:
    """Exact t-SNE to 2-D, initialized from the first two principal components."""
    params = params or TsneParams()
    n = emb.n
    if n < 4:
        raise DiversityError(f"t-SNE needs at least 4 points, got {n}")
    if params.perplexity >= (n - 1) / 3:
        raise DiversityError(f"perplexity {params.perplexity} is infeasible for {n} points (< {(n - 1) / 3:.2f})")

    x = emb.vectors
    p = conditional_affinities(squareform(pdist(x, "sqeuclidean")), params.perplexity)
    p = np.maximum((p + p.T) / (2.0 * n), 1e-12)

    y = _pca_project(x, 2)
    spread = y[:, 0].std()
    if spread == 0.0:
        rng = np.random.default_rng(params.seed)
        y = rng.standard_normal((n, 2))
        spread = y[:, 0].std()
    y = y / spread * 1e-4

    learning_rate = params.learning_rate or max(n / 12.0, 50.0)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace: list[tuple[int, float]] = []

    for it in range(params.iterations):
        exaggerating = it < params.exaggeration_iterations
        p_eff = p * params.early_exaggeration if exaggerating else p

        num = 1.0 / (1.0 + squareform(pdist(y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)

        if not exaggerating and (it == params.exaggeration_iterations or (it + 1) % params.log_every == 0):
            trace.append((it, _kl(p, q)))

        w = (p_eff - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)

        momentum = params.momentum if exaggerating else params.final_momentum
        same_sign = (grad > 0) == (velocity > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, MIN_GAIN)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    num = 1.0 / (1.0 + squareform(pdist(y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    trace.append((params.iterations, _kl(p, np.maximum(num / num.sum(), 1e-12))))
    logger.debug("t-SNE finished", extra={"points": n, "final_kl": trace[-1][1]})
    return TsneResult(points=y, kl_trace=trace)


# ---------------------------------------------------
# Analysis command
# ---------------------------------------------------
@dataclass(frozen=True)
class DatasetSummary:
    """Per-dataset variance statistics."""

    label: str
    n: int
    dim: int
    components: dict[str, int]
    top5_share: float


def summarize(emb: EmbeddingSet, cumulative: np.ndarray) -> DatasetSummary:
    """Component counts for each variance threshold plus the top-5 share."""
    return DatasetSummary(
        label=emb.label,
        n=emb.n,
        dim=emb.dim,
        components={f"{int(t * 100)}%": components_for(cumulative, t) for t in THRESHOLDS},
        top5_share=float(cumulative[min(5, len(cumulative)) - 1]),
    )


def run_diversity(
    path_a: str | Path,
    path_b: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    params: TsneParams | None = None,
) -> dict[str, Path]:
    """Normalize, size-match, run PCA and a joint t-SNE; write plot-ready CSVs."""
    params = params or TsneParams(seed=seed)
    a = l2_normalize(load_embeddings(path_a))
    b = l2_normalize(load_embeddings(path_b))
    if a.label == b.label:
        a = EmbeddingSet(f"{a.label}_a", a.vectors, a.ids)
        b = EmbeddingSet(f"{b.label}_b", b.vectors, b.ids)
    if a.dim != b.dim:
        raise DiversityError(f"embedding dimensions differ: {a.dim} vs {b.dim}")
    a, b = subsample_match(a, b, seed)

    cum_a, cum_b = pca_explained_variance(a), pca_explained_variance(b)
    joint = EmbeddingSet("joint", np.vstack([a.vectors, b.vectors]), a.ids + b.ids)
    result = tsne(joint, params)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "points": out / "tsne_points.csv",
        "variance": out / "cumulative_variance.csv",
        "thresholds": out / "thresholds.json",
        "kl_trace": out / "kl_trace.csv",
    }
    labels = [a.label] * a.n + [b.label] * b.n
    with paths["points"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "id", "x", "y"])
        for label, ident, (px, py) in zip(labels, joint.ids, result.points, strict=True):
            writer.writerow([label, ident, repr(float(px)), repr(float(py))])
    with paths["variance"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", a.label, b.label])
        for k in range(max(len(cum_a), len(cum_b))):
            writer.writerow(
                [
                    k + 1,
                    repr(float(cum_a[k])) if k < len(cum_a) else "",
                    repr(float(cum_b[k])) if k < len(cum_b) else "",
                ]
            )
    with paths["kl_trace"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "kl"])
        writer.writerows([it, repr(kl)] for it, kl in result.kl_trace)
    summaries = [summarize(a, cum_a), summarize(b, cum_b)]
    paths["thresholds"].write_text(
        json.dumps(
            {"seed": seed, "tsne": params.model_dump(), "datasets": [s.__dict__ for s in summaries]},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    logger.info(
        "Diversity analysis written",
        extra={"out": str(out), "n": a.n, "components": {s.label: s.components for s in summaries}},
    )
    return paths
