"""Image-pair quality metrics: native PSNR/SSIM plus provider-backed DINO and LPIPS scores."""

import logging
import math

import numpy as np
from scipy.ndimage import gaussian_filter

from reorm.backends.base import Embedder, PairScorer
from reorm.errors import BackendError, DimensionMismatchError, MetricError, ProviderUnavailable
from reorm.raster import Image
from reorm.schemas import MetricSet

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Recorded next to every report so the numbers can be interpreted later
METRIC_METADATA = {
    "psnr": {"max_value": MAX_VALUE, "cap_db": PSNR_CAP, "over": "all pixels and channels"},
    "ssim": {
        "channel": "luma (ITU-R BT.601)",
        "window": f"{SSIM_WINDOW}x{SSIM_WINDOW} gaussian",
        "sigma": SSIM_SIGMA,
        "k1": SSIM_K1,
        "k2": SSIM_K2,
        "mean_over": "valid windows",
    },
    "dino": {"definition": "cosine similarity of provider embeddings", "preprocessing": "provider"},
    "lpips": {"definition": "provider distance", "preprocessing": "provider"},
}


def _check_pair(a: Image, b: Image) -> None:
    if a.size != b.size:
        raise DimensionMismatchError(f"Image sizes differ: {a.size} vs {b.size}")


def psnr(a: Image, b: Image) -> float:
    """10·log10(MAX²/MSE) in dB; identical images give the cap."""
    _check_pair(a, b)
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(MAX_VALUE**2 / mse), PSNR_CAP)


def _luma(image: Image) -> np.ndarray:
    return image.pixels.astype(np.float64) @ LUMA_WEIGHTS


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM over the valid 11×11 gaussian windows of the luma channel."""
    _check_pair(a, b)
    if min(a.width, a.height) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.size}")

    x, y = _luma(a), _luma(b)
    c1 = (SSIM_K1 * MAX_VALUE) ** 2
    c2 = (SSIM_K2 * MAX_VALUE) ** 2
    # truncate so the kernel spans exactly the 11×11 window
    radius = SSIM_WINDOW // 2

    def blur(arr: np.ndarray) -> np.ndarray:
        return gaussian_filter(arr, sigma=SSIM_SIGMA, truncate=radius / SSIM_SIGMA)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    ssim_map = (num / den)[radius:-radius, radius:-radius]
    return float(np.clip(ssim_map.mean(), -1.0, 1.0))


def embed_cosine(e1: np.ndarray | list[float], e2: np.ndarray | list[float]) -> float:
    """Cosine similarity of two embedding vectors."""
    v1 = np.asarray(e1, dtype=np.float64).ravel()
    v2 = np.asarray(e2, dtype=np.float64).ravel()
    if v1.size == 0 or v1.shape != v2.shape:
        raise MetricError(f"Embedding lengths differ or are empty: {v1.size} vs {v2.size}")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise MetricError("Cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))


def pair_score(a: Image, b: Image, provider: PairScorer | None) -> float:
    """Perceptual distance from the provider, validated to be a finite value >= 0."""
    if provider is None:
        raise ProviderUnavailable("no pair scorer configured")
    _check_pair(a, b)
    value = float(provider.score_pair(a, b))
    if not math.isfinite(value) or value < 0.0:
        raise MetricError(f"Pair scorer returned an invalid distance: {value}")
    return value


def compute_metric_set(
    edited: Image,
    ground_truth: Image,
    embedder: Embedder | None = None,
    scorer: PairScorer | None = None,
) -> MetricSet:
    """All metrics for one pair; neural scores stay absent when their provider fails."""
    dino = lpips = None
    if embedder is not None:
        try:
            dino = embed_cosine(embedder.embed(edited), embedder.embed(ground_truth))
        except (BackendError, MetricError) as e:
            logger.warning("DINO score unavailable", extra={"error": str(e)})
    if scorer is not None:
        try:
            lpips = pair_score(edited, ground_truth, scorer)
        except (BackendError, MetricError) as e:
            logger.warning("LPIPS score unavailable", extra={"error": str(e)})
    return MetricSet(dino=dino, lpips=lpips, psnr=psnr(edited, ground_truth), ssim=ssim(edited, ground_truth))
