"""Raster types for images and masks plus the mask algebra shared by all stages."""

import base64
import binascii
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

from reorm.errors import DimensionMismatchError, UnsupportedImageError
from reorm.util import sha256_hex

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True, eq=False)
class Image:
    """H×W×3 8-bit RGB raster. The pixel buffer is read-only."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise UnsupportedImageError(f"Image must be H×W×3, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise UnsupportedImageError(f"Image must be 8-bit, got {arr.dtype}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UnsupportedImageError("Image must be at least 1×1")
        arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        """Columns."""
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        """Rows."""
        return int(self.pixels.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.width, self.height

    def digest(self) -> str:
        """Content hash covering dimensions and samples."""
        return sha256_hex(f"{self.width}x{self.height}:".encode() + self.pixels.tobytes())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def blank(cls, width: int, height: int, color: tuple[int, int, int] = (0, 0, 0)) -> "Image":
        """Uniform image of the given color."""
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = color
        return cls(arr)


@dataclass(frozen=True, eq=False)
class Mask:
    """H×W binary raster: 1 marks pixels to remove."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise UnsupportedImageError(f"Mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UnsupportedImageError("Mask must be at least 1×1")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.isin(arr, (0, 1)).all():
            raise UnsupportedImageError("Mask values must be 0 or 1")
        arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        """Columns."""
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        """Rows."""
        return int(self.data.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.width, self.height

    def count(self) -> int:
        """Number of set pixels."""
        return int(self.data.sum())

    def is_empty(self) -> bool:
        """True when no pixel is set."""
        return not self.data.any()

    def digest(self) -> str:
        """Content hash covering dimensions and samples."""
        return sha256_hex(f"mask:{self.width}x{self.height}:".encode() + self.data.tobytes())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def zeros(cls, width: int, height: int) -> "Mask":
        """All-keep mask."""
        return cls(np.zeros((height, width), dtype=np.uint8))

    def intersect(self, other: "Mask") -> "Mask":
        """Pixelwise AND."""
        if other.size != self.size:
            raise DimensionMismatchError(f"Mask sizes differ: {self.size} vs {other.size}")
        return Mask(self.data & other.data)


# ---------------------------------------------------
# Mask algebra
# ---------------------------------------------------
def mask_union(masks: list[Mask], reference: Image | Mask | None = None) -> Mask:
    """Pixelwise OR of ``masks``; ``reference`` supplies the size of an empty union."""
    if reference is not None:
        width, height = reference.size
    elif masks:
        width, height = masks[0].size
    else:
        raise DimensionMismatchError("Empty union needs a reference raster for its dimensions")

    out = np.zeros((height, width), dtype=np.uint8)
    for i, m in enumerate(masks):
        if m.size != (width, height):
            raise DimensionMismatchError(
                f"Mask {i} is {m.width}×{m.height}, expected {width}×{height}",
                index=i,
            )
        out |= m.data
    return Mask(out)


def mask_dilate(mask: Mask, radius: int) -> Mask:
    """Dilate with a square structuring element of side 2·radius+1."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or mask.is_empty():
        return mask
    grown = ndimage.maximum_filter(mask.data, size=2 * radius + 1, mode="constant", cval=0)
    return Mask(grown)


def mask_iou(a: Mask, b: Mask) -> float:
    """|a∩b| / |a∪b|; two empty masks agree completely (1.0)."""
    if a.size != b.size:
        raise DimensionMismatchError(f"Mask sizes differ: {a.size} vs {b.size}")
    union = int(np.count_nonzero(a.data | b.data))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.data & b.data)) / union


def check_same_size(image: Image, mask: Mask) -> None:
    """Raise when a mask does not cover its image exactly."""
    if image.size != mask.size:
        raise DimensionMismatchError(f"Mask {mask.size} does not match image {image.size}")


# ---------------------------------------------------
# PNG codecs
# ---------------------------------------------------
def _png_bit_depth(raw: bytes) -> int | None:
    # IHDR is always the first chunk; bit depth sits at byte 24
    if raw.startswith(PNG_SIGNATURE) and len(raw) > 24:
        return raw[24]
    return None


def _open(raw: bytes) -> PILImage.Image:
    try:
        pil = PILImage.open(io.BytesIO(raw))
        pil.load()
        return pil
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise UnsupportedImageError(f"Undecodable image data: {e}") from e


def _b64decode(data: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as e:
        raise UnsupportedImageError(f"Invalid base64 payload: {e}") from e


def image_from_bytes(raw: bytes) -> Image:
    """Decode an 8-bit RGB image; alpha, palette, gray and 16-bit inputs are rejected."""
    depth = _png_bit_depth(raw)
    if depth is not None and depth != 8:
        raise UnsupportedImageError(f"Only 8-bit images are supported, got {depth}-bit PNG")
    with _open(raw) as pil:
        if pil.mode != "RGB":
            raise UnsupportedImageError(f"Only RGB images are supported, got mode {pil.mode}")
        return Image(np.asarray(pil, dtype=np.uint8))


def image_to_bytes(image: Image) -> bytes:
    """Encode as lossless PNG."""
    buf = io.BytesIO()
    PILImage.fromarray(image.pixels).save(buf, format="PNG")
    return buf.getvalue()


def mask_from_bytes(raw: bytes) -> Mask:
    """Decode a single-channel PNG with values {0,255}."""
    with _open(raw) as pil:
        if pil.mode == "1":
            pil = pil.convert("L")
        if pil.mode != "L":
            raise UnsupportedImageError(f"Masks must be single-channel, got mode {pil.mode}")
        arr = np.asarray(pil, dtype=np.uint8)
    if not np.isin(arr, (0, 255)).all():
        raise UnsupportedImageError("Mask PNG values must be 0 or 255")
    return Mask((arr == 255).astype(np.uint8))


def mask_to_bytes(mask: Mask) -> bytes:
    """Encode as a single-channel {0,255} PNG."""
    buf = io.BytesIO()
    PILImage.fromarray(mask.data * np.uint8(255)).save(buf, format="PNG")
    return buf.getvalue()


def load_image(path: str | Path) -> Image:
    """Read an 8-bit RGB PNG."""
    return image_from_bytes(Path(path).read_bytes())


def save_image(image: Image, path: str | Path) -> Path:
    """Write a PNG, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(image_to_bytes(image))
    return path


def load_mask(path: str | Path) -> Mask:
    """Read a mask PNG."""
    return mask_from_bytes(Path(path).read_bytes())


def save_mask(mask: Mask, path: str | Path) -> Path:
    """Write a mask PNG, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(mask_to_bytes(mask))
    return path


def image_to_b64(image: Image) -> str:
    """Encode an image as base64 PNG."""
    return base64.b64encode(image_to_bytes(image)).decode("ascii")


def image_from_b64(data: str) -> Image:
    """Decode a base64 image PNG."""
    return image_from_bytes(_b64decode(data))


def mask_to_b64(mask: Mask) -> str:
    """Encode a mask as base64 PNG."""
    return base64.b64encode(mask_to_bytes(mask)).decode("ascii")


def mask_from_b64(data: str) -> Mask:
    """Decode a base64 mask PNG."""
    return mask_from_bytes(_b64decode(data))


def fit_longest_side(image: Image, max_side: int) -> Image:
    """Bilinear downscale so the longest side is at most ``max_side``; smaller images pass through."""
    longest = max(image.width, image.height)
    if longest <= max_side:
        return image
    scale = max_side / longest
    size = (max(1, round(image.width * scale)), max(1, round(image.height * scale)))
    pil = PILImage.fromarray(image.pixels).resize(size, PILImage.Resampling.BILINEAR)
    return Image(np.asarray(pil, dtype=np.uint8))
