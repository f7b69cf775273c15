"""Raster plumbing shared by every stage.

Rasters are plain 2-D numpy arrays:

* gray images: float64 in [0, 1]
* scalar fields: finite float64, unbounded
* binary masks: uint8 in {0, 1}
* probability maps: float64 in [0, 1]

Images are read and written as 8/16-bit single-channel PNG or PGM.  Float
fields go through the lossless VGM1 container (magic ``b"VGM1"``, u32 height,
u32 width, then float32 values row-major, all little-endian).
"""

import math
import os
import struct
from fractions import Fraction

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

VGM_MAGIC = b"VGM1"

_FORMATS = {"png", "png16", "pgm", "pgm16", "vgm"}
_EXT_FORMATS = {".png": "png", ".pgm": "pgm", ".vgm": "vgm"}


class ImageFormatError(ValueError):
    """Raised when a raster file cannot be interpreted as a grayscale image."""


def as_gray(img):
    """Validate and return `img` as a float64 gray image in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D raster, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("gray image values must lie in [0, 1]")
    return arr


def as_mask(mask):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("binary mask values must be exactly 0 or 1")
    return arr.astype(np.uint8)


def as_field(field):
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scalar field contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# I/O

def _read_vgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != VGM_MAGIC:
        raise ImageFormatError(f"{path}: not a VGM1 file (bad magic)")
    height, width = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * height * width
    if len(raw) != expected:
        raise ImageFormatError(
            f"{path}: VGM1 payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width)
    return data.astype(np.float64)


def _write_vgm(arr, path):
    arr = np.asarray(arr)
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(VGM_MAGIC)
        fh.write(struct.pack("<II", height, width))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_image(path):
    """Load a single-channel 8/16-bit PNG or PGM, rescaled to [0, 1].

    VGM1 files are returned as-is (float64 field, not rescaled).
    """
    path = os.fspath(path)
    if path.lower().endswith(".vgm"):
        return _read_vgm(path)
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc

    mode = im.mode
    if mode in ("L", "1"):
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    elif mode in ("I;16", "I;16B", "I;16L"):
        arr = np.asarray(im, dtype=np.float64) / 65535.0
    elif mode == "I" and im.format in ("PPM", "PNG"):
        # Pillow decodes 16-bit PGM (and some 16-bit PNGs) into 32-bit 'I'.
        arr = np.asarray(im, dtype=np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise ImageFormatError(f"{path}: unsupported bit depth (values exceed 16 bits)")
        arr = arr / 65535.0
    elif mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr", "PA", "La"):
        raise ImageFormatError(
            f"{path}: unsupported channel count (mode {mode!r}, {len(im.getbands())} bands)")
    else:
        raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode!r})")
    return arr


def save_image(img, path, format=None):
    """Write a raster.

    `format` is one of ``png``, ``png16``, ``pgm``, ``pgm16`` or ``vgm``; when
    omitted it is inferred from the extension.  Binary masks are stored as
    {0, 255} (or {0, 65535}) so that reloading and thresholding recovers them.
    """
    path = os.fspath(path)
    if format is None:
        ext = os.path.splitext(path)[1].lower()
        if ext not in _EXT_FORMATS:
            raise ValueError(f"cannot infer raster format from extension {ext!r}")
        format = _EXT_FORMATS[ext]
    if format not in _FORMATS:
        raise ValueError(f"unknown raster format {format!r}")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")

    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {arr.shape}")
    if format == "vgm":
        _write_vgm(as_field(arr), path)
        return

    values = arr.astype(np.float64)
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("values outside [0, 1] need the lossless 'vgm' format")
    if format.endswith("16"):
        q = np.rint(values * 65535.0).astype(np.uint16)
    else:
        q = np.rint(values * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG" if format.startswith("png") else "PPM")


def load_mask(path):
    """Load a mask file; any non-zero pixel counts as foreground."""
    return (load_image(path) > 0.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Scale space

def gaussian_kernels(sigma):
    """Sampled 1-D Gaussian and second-derivative-of-Gaussian kernels.

    Both have radius ``ceil(4 * sigma)``.  The smoothing kernel sums to one;
    the second-derivative kernel is corrected to have zero sum and a second
    moment of exactly 2, so it annihilates constants and differentiates
    quadratics exactly.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    d2 = (x ** 2 / sigma ** 4 - 1.0 / sigma ** 2) * g
    d2 -= g * d2.sum()
    d2 *= 2.0 / np.sum(d2 * x ** 2)
    d1 = -x / sigma ** 2 * g
    d1 *= -1.0 / np.sum(d1 * x)
    return g, d1, d2


def gaussian_second_derivatives(img, sigma):
    """Scale-normalized Hessian entries (Ixx, Ixy, Iyy) at scale `sigma`.

    x runs along columns and y along rows.  Each entry is multiplied by
    sigma**2; borders are reflected (edge pixel repeated).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {img.shape}")
    # Derivatives ignore offsets; removing one makes constant regions exactly
    # zero instead of round-off that an auto-scaled c would amplify.
    if img.size:
        img = img - img.flat[0]
    g, d1, d2 = gaussian_kernels(sigma)

    def sep(kx, ky):
        tmp = correlate1d(img, ky, axis=0, mode="reflect")
        return correlate1d(tmp, kx, axis=1, mode="reflect")

    # Kernels are symmetric (g, d2) or antisymmetric (d1); correlation with
    # the flipped antisymmetric kernel equals convolution.
    d1c = d1[::-1]
    scale = sigma ** 2
    ixx = sep(d2, g) * scale
    iyy = sep(g, d2) * scale
    ixy = sep(d1c, d1c) * scale
    return ixx, ixy, iyy


# ---------------------------------------------------------------------------
# Percentiles and patches

def percentile(field, alpha):
    """Nearest-rank percentile: sorted value at index ceil(alpha/100 * n) - 1."""
    if not 0.0 <= alpha <= 100.0:
        raise ValueError(f"percentile alpha must be in [0, 100], got {alpha}")
    values = np.sort(np.asarray(field, dtype=np.float64), axis=None)
    n = values.size
    if n == 0:
        raise ValueError("percentile of an empty field")
    rank = math.ceil(Fraction(alpha) * n / 100)
    index = min(max(rank - 1, 0), n - 1)
    return float(values[index])


def grid_shape(shape, patch_size):
    """Return (rows, cols) of the non-overlapping patch grid for `shape`."""
    height, width = shape
    p = int(patch_size)
    if p < 1:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if height % p or width % p:
        raise ValueError(
            f"patch size {p} does not divide raster dimensions {height}x{width}")
    return height // p, width // p


def partition(raster, patch_size):
    """Split an HxW raster into (N, P, P) patches in row-major patch order."""
    arr = np.asarray(raster)
    rows, cols = grid_shape(arr.shape, patch_size)
    p = int(patch_size)
    return arr.reshape(rows, p, cols, p).swapaxes(1, 2).reshape(rows * cols, p, p)


def reassemble(patches, rows, cols):
    """Inverse of :func:`partition`."""
    patches = np.asarray(patches)
    n, p, q = patches.shape
    if n != rows * cols or p != q:
        raise ValueError(f"cannot tile {patches.shape} patches into {rows}x{cols}")
    return patches.reshape(rows, cols, p, p).swapaxes(1, 2).reshape(rows * p, cols * p)
