"""Grayscale image container conventions, convolution, noise and quality metrics.

Images are 2-D float64 arrays in row-major order with intensities nominally
in [0, 255].  Values may leave that range during diffusion; they are only
clamped when exported to an 8-bit file.  All boundary handling uses
edge-inclusive mirror (symmetric) padding, so index -1 maps to 0, index -2
to 1, and index N to N-1.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d

PEAK = 255.0

# 11x11 Gaussian window, sigma 1.5, and the standard stabilising constants.
SSIM_WINDOW_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2


class FormatError(ValueError):
    """Raised for unsupported or malformed image files."""


def as_image(u) -> np.ndarray:
    """Coerce input to a 2-D float64 array, rejecting anything else."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {u.shape}")
    return u


def _check_kernel(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got shape {k.shape}")
    if k.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k.shape[0]}")
    return k


def mirror_pad(u: np.ndarray, radius: int) -> np.ndarray:
    """Symmetric (edge-inclusive mirror) padding by `radius` on all sides."""
    return np.pad(u, radius, mode="symmetric")


def rotate180(k: np.ndarray) -> np.ndarray:
    """Reverse kernel taps along both axes."""
    k = _check_kernel(k)
    return np.ascontiguousarray(k[::-1, ::-1])


def convolve(u: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution of `u` with `k` under mirror padding.

    This is true convolution (the kernel is flipped), equal to the action
    of the sparse convolution matrix built from the mirror-padding rule.
    """
    u = as_image(u)
    k = _check_kernel(k)
    if u.shape[0] < k.shape[0] or u.shape[1] < k.shape[1]:
        raise ValueError(f"image {u.shape} smaller than kernel {k.shape}")
    return convolve2d(u, k, mode="same", boundary="symm")


def convolve_adjoint(v: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Exact transpose of the mirror-padded convolution operator.

    Writing convolve(u, k) = C @ vec(u), this returns C.T @ vec(v).  The
    transpose of the padding step folds every padded sample back onto its
    mirror source, which is what makes the identity
    <convolve(u, k), v> == <u, convolve_adjoint(v, k)> hold to roundoff.
    """
    v = as_image(v)
    k = _check_kernel(k)
    if v.shape[0] < k.shape[0] or v.shape[1] < k.shape[1]:
        raise ValueError(f"image {v.shape} smaller than kernel {k.shape}")
    r = k.shape[0] // 2
    full = convolve2d(v, rotate180(k), mode="full")
    h, w = v.shape
    rows = _mirror_indices(h, r)
    cols = _mirror_indices(w, r)
    out = np.zeros_like(v)
    np.add.at(out, (rows[:, None], cols[None, :]), full)
    return out


def _mirror_indices(n: int, radius: int) -> np.ndarray:
    """Source index in [0, n) for each padded position in [-radius, n+radius)."""
    idx = np.arange(-radius, n + radius)
    idx = np.where(idx < 0, -1 - idx, idx)
    idx = np.where(idx >= n, 2 * n - 1 - idx, idx)
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"padding radius {radius} too large for extent {n}")
    return idx


def convolve_kernel_gradient(u: np.ndarray, g: np.ndarray, size: int) -> np.ndarray:
    """Gradient of <g, convolve(u, k)> with respect to the size x size kernel k.

    `u` is treated as data (its mirror padding included), so no fold-back
    is needed; the result is the patch-weighted accumulation over pixels.
    """
    u = as_image(u)
    g = as_image(g)
    if u.shape != g.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {g.shape}")
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    upad = mirror_pad(u, size // 2)
    windows = sliding_window_view(upad, u.shape)  # (size, size, H, W)
    corr = np.sum(windows * g, axis=(2, 3))
    return np.ascontiguousarray(corr[::-1, ::-1])


def add_gaussian_noise(u: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Corrupt with iid zero-mean Gaussian noise of std `sigma`, no clipping."""
    u = as_image(u)
    if sigma < 0:
        raise ValueError(f"noise std must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    return u + rng.normal(0.0, sigma, size=u.shape) if sigma > 0 else u.copy()


def psnr(u: np.ndarray, v: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a peak of 255.

    Returns +inf when the images are identical.
    """
    u = as_image(u)
    v = as_image(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    mse = float(np.mean((u - v) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(PEAK * PEAK / mse))


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW_SIZE - 1) / 2.0
    coords = np.arange(SSIM_WINDOW_SIZE) - half
    g = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / np.sum(w)


def _ssim_fields(u, v, w):
    """Local window statistics (valid region only) used by the SSIM index."""
    mu_u = convolve2d(u, w, mode="valid")
    mu_v = convolve2d(v, w, mode="valid")
    uu = convolve2d(u * u, w, mode="valid")
    vv = convolve2d(v * v, w, mode="valid")
    uv = convolve2d(u * v, w, mode="valid")
    return mu_u, mu_v, uu, vv, uv


def _ssim_map(mu_u, mu_v, uu, vv, uv):
    a1 = 2.0 * mu_u * mu_v + SSIM_C1
    a2 = 2.0 * (uv - mu_u * mu_v) + SSIM_C2
    b1 = mu_u * mu_u + mu_v * mu_v + SSIM_C1
    b2 = (uu - mu_u * mu_u) + (vv - mu_v * mu_v) + SSIM_C2
    return a1, a2, b1, b2, (a1 * a2) / (b1 * b2)


def ssim(u: np.ndarray, v: np.ndarray) -> float:
    """Mean structural similarity over the valid 11x11 Gaussian windows."""
    u = as_image(u)
    v = as_image(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    if min(u.shape) < SSIM_WINDOW_SIZE:
        raise ValueError(
            f"image {u.shape} smaller than the {SSIM_WINDOW_SIZE}x"
            f"{SSIM_WINDOW_SIZE} SSIM window"
        )
    w = _ssim_window()
    *_, smap = _ssim_map(*_ssim_fields(u, v, w))
    return float(np.mean(smap))


def ssim_and_gradient(u: np.ndarray, v: np.ndarray):
    """SSIM of (u, v) together with its analytic gradient in `u`.

    The window statistics are linear functionals of `u`; differentiating
    the index through them and applying the adjoint of the valid-mode
    window correlation (a full-mode convolution) gives the exact gradient.
    """
    u = as_image(u)
    v = as_image(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    if min(u.shape) < SSIM_WINDOW_SIZE:
        raise ValueError(
            f"image {u.shape} smaller than the {SSIM_WINDOW_SIZE}x"
            f"{SSIM_WINDOW_SIZE} SSIM window"
        )
    w = _ssim_window()
    mu_u, mu_v, uu, vv, uv = _ssim_fields(u, v, w)
    a1, a2, b1, b2, smap = _ssim_map(mu_u, mu_v, uu, vv, uv)
    denom = b1 * b2
    count = smap.size
    # Partials of the local index with respect to the window statistics.
    d_mu = (2.0 * mu_v * (a2 - a1) - 2.0 * smap * mu_u * (b2 - b1)) / denom
    d_uu = -smap / b2
    d_uv = 2.0 * a1 / denom
    back = lambda gmap: convolve2d(gmap, w, mode="full")
    grad = (back(d_mu) + 2.0 * u * back(d_uu) + v * back(d_uv)) / count
    return float(np.mean(smap)), grad


# ---------------------------------------------------------------------------
# File I/O: binary PGM (P5) is the required format, 8-bit PNG is optional.
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image (PGM required, PNG optional)."""
    path = str(path)
    if path.lower().endswith(".png"):
        return _read_png(path)
    return read_pgm(path)


def write_image(u: np.ndarray, path) -> None:
    """Write as 8-bit grayscale after rounding and clamping to [0, 255]."""
    path = str(path)
    if path.lower().endswith(".png"):
        _write_png(u, path)
    else:
        write_pgm(u, path)


def quantize(u: np.ndarray) -> np.ndarray:
    """Round and clamp to the 8-bit range."""
    return np.clip(np.rint(as_image(u)), 0, 255).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace between header and raster
    width, height, maxval = fields
    if maxval > 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (8-bit only)")
    if maxval <= 0 or width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid PGM header")
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: raster shorter than header promises")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64)


def write_pgm(u: np.ndarray, path) -> None:
    q = quantize(u)
    header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise FormatError("PNG support needs Pillow (pip install Pillow)") from exc
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: PNG mode {im.mode!r} unsupported (8-bit grayscale only)")
        return np.asarray(im, dtype=np.float64)


def _write_png(u: np.ndarray, path) -> None:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise FormatError("PNG support needs Pillow (pip install Pillow)") from exc
    Image.fromarray(quantize(u), mode="L").save(path)
