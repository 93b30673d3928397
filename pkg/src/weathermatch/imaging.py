"""Image container conventions, quality metrics, and file I/O.

An image is a numpy array of shape (H, W, C) with C=3 for RGB and C=1 for
masks / transmission maps.  Values are real intensities, nominally in [0, 1];
generator outputs and final restorations are clipped, intermediate quantities
(patterns, unclipped composites) may leave the range.

Two on-disk formats:
  * PNG   — 8-bit RGB, no alpha; lossy only through quantization to 1/255.
  * .mwim — raw float32: magic b"MWIM", three little-endian uint32
            (height, width, channels), then H*W*C little-endian float32,
            row-major, channel-fastest.  Bit-exact round trips.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, ParameterError, ShapeError

RAW_MAGIC = b"MWIM"

# PSNR is capped so that reports never contain infinities; the cap value is
# recorded in MetricsReport metadata.
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ensure_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the (H, W, C) convention and return the array unchanged."""
    if not isinstance(arr, np.ndarray) or arr.ndim != 3:
        raise ShapeError(f"{name}: expected an (H, W, C) array, got {getattr(arr, 'shape', None)}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    ensure_image(a, "a")
    ensure_image(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, computed in double precision.

    Capped at 100 dB once MSE drops below max_val^2 * 1e-10.
    """
    _check_same_shape(a, b)
    if max_val <= 0:
        raise ParameterError(f"max_val must be positive, got {max_val}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse < max_val * max_val * 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode filtering of a 2D plane with a 1D kernel."""
    k = kernel.size
    h, w = plane.shape
    rows = np.zeros((h - k + 1, w), dtype=np.float64)
    for i in range(k):
        rows += kernel[i] * plane[i : i + h - k + 1, :]
    out = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for j in range(k):
        out += kernel[j] * rows[:, j : j + w - k + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), L = 1.

    Computed per channel over valid window positions, then averaged across
    channels.  All arithmetic in double precision.
    """
    _check_same_shape(a, b)
    h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ParameterError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    per_channel = []
    for ch in range(c):
        x = a[:, :, ch].astype(np.float64)
        y = b[:, :, ch].astype(np.float64)
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        xx = _filter_valid(x * x, kernel) - mu_x * mu_x
        yy = _filter_valid(y * y, kernel) - mu_y * mu_y
        xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        per_channel.append(float(np.mean(num / den)))
    return float(np.mean(per_channel))


@dataclass
class MetricRecord:
    id: str
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    """Per-image PSNR/SSIM records plus their aggregate statistics."""

    records: list[MetricRecord]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.metadata.setdefault("psnr_cap_db", PSNR_CAP_DB)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.records]))

    @property
    def std_psnr(self) -> float:
        return float(np.std([r.psnr_db for r in self.records]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.records]))

    @property
    def std_ssim(self) -> float:
        return float(np.std([r.ssim for r in self.records]))

    def to_csv(self) -> str:
        lines = ["id,psnr_db,ssim"]
        for r in self.records:
            lines.append(f"{r.id},{r.psnr_db!r},{r.ssim!r}")
        lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r}")
        lines.append(f"std,{self.std_psnr!r},{self.std_ssim!r}")
        return "\n".join(lines) + "\n"


def write_image(path: str, img: np.ndarray) -> None:
    """Write PNG (.png, 8-bit RGB) or raw float (.mwim) depending on extension."""
    ensure_image(img)
    p = str(path)
    if p.endswith(".png"):
        if img.shape[2] != 3:
            raise ParameterError("PNG output requires a 3-channel image")
        q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(q, mode="RGB").save(p, format="PNG")
    elif p.endswith(".mwim"):
        h, w, c = img.shape
        with open(p, "wb") as f:
            f.write(RAW_MAGIC)
            f.write(struct.pack("<III", h, w, c))
            f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
    else:
        raise FormatError(f"unsupported image extension: {p}")


def read_image(path: str) -> np.ndarray:
    """Read a .png (as float32 in [0,1]) or .mwim (bit-exact float32) image."""
    p = str(path)
    if p.endswith(".png"):
        with PILImage.open(p) as im:
            if im.mode != "RGB":
                raise FormatError(f"unsupported PNG mode {im.mode!r} (need 8-bit RGB)")
            arr = np.asarray(im, dtype=np.uint8)
        return (arr.astype(np.float32) / 255.0).reshape(arr.shape[0], arr.shape[1], 3)
    if p.endswith(".mwim"):
        with open(p, "rb") as f:
            magic = f.read(4)
            if magic != RAW_MAGIC:
                raise FormatError(f"bad magic {magic!r} in {p}")
            header = f.read(12)
            if len(header) != 12:
                raise FormatError(f"truncated header in {p}")
            h, w, c = struct.unpack("<III", header)
            payload = f.read(h * w * c * 4)
            if len(payload) != h * w * c * 4:
                raise FormatError(f"truncated payload in {p}")
        return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
    raise FormatError(f"unsupported image extension: {p}")
