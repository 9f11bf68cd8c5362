"""Thin-section image pre-processing.

Pipeline per section: equalize the PPL and XPL images, stack them into a
six-layer composite, fit a per-image PCA on the pixel vectors, project the
first three principal components into a comprehensive image (CI), and
normalize everything to the unit interval.

Rasters live on disk as binary PPM/PGM plus a small ``.meta`` text sidecar
that records the channel role and processing state; round-trips are
bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ROLE_PPL = "ppl"
ROLE_XPL = "xpl"
ROLE_COMPOSITE6 = "composite6"
ROLE_CI = "ci"

_ROLE_CHANNELS = {ROLE_PPL: 3, ROLE_XPL: 3, ROLE_CI: 3, ROLE_COMPOSITE6: 6}


@dataclass
class RasterImage:
    """H x W x C sample grid with channel-role metadata.

    ``pixels`` is uint8 for raw data and float64 in [0, 1] once normalized.
    """

    pixels: np.ndarray
    role: str
    normalized: bool = False
    equalized: bool = False

    def __post_init__(self) -> None:
        if self.role not in _ROLE_CHANNELS:
            raise ValueError(f"unknown raster role {self.role!r}")
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (H, W, C), got shape {self.pixels.shape}")
        h, w, c = self.pixels.shape
        if h < 1 or w < 1:
            raise ValueError("raster must contain at least one pixel")
        if c != _ROLE_CHANNELS[self.role]:
            raise ValueError(f"role {self.role!r} requires {_ROLE_CHANNELS[self.role]} channels, got {c}")
        if self.normalized:
            if self.pixels.dtype != np.float64:
                raise ValueError("normalized rasters must hold float64 samples")
        elif self.pixels.dtype != np.uint8:
            raise ValueError("raw rasters must hold uint8 samples")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PcaModel:
    """Per-image PCA of the 6-channel pixel population.

    ``eigenvectors`` holds principal components as columns, signs fixed so
    each column's largest-magnitude entry is positive; eigenvalues are
    sorted descending.
    """

    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray


def histogram_equalize(image: RasterImage) -> RasterImage:
    """Classic per-channel histogram equalization of an 8-bit raster.

    Maps value v to round((cdf(v) - cdf_min) / (N - cdf_min) * 255). A
    constant channel has nothing to redistribute and passes through
    unchanged.
    """
    if image.normalized:
        raise ValueError("histogram equalization operates on raw 8-bit rasters")
    out = np.empty_like(image.pixels)
    n = image.height * image.width
    for c in range(image.channels):
        channel = image.pixels[:, :, c]
        hist = np.bincount(channel.ravel(), minlength=256)
        cdf = hist.cumsum()
        cdf_min = int(cdf[np.nonzero(hist)[0][0]])
        if n == cdf_min:  # constant channel
            out[:, :, c] = channel
            continue
        lut = np.rint((cdf - cdf_min) / (n - cdf_min) * 255.0)
        lut = np.clip(lut, 0, 255).astype(np.uint8)
        out[:, :, c] = lut[channel]
    return replace(image, pixels=out, equalized=True)


def stack_layers(ppl: RasterImage, xpl: RasterImage) -> RasterImage:
    """Stack a PPL/XPL pair into one 6-channel composite.

    Channel order is [PPL_R, PPL_G, PPL_B, XPL_R, XPL_G, XPL_B].
    """
    if ppl.role != ROLE_PPL or xpl.role != ROLE_XPL:
        raise ValueError(f"expected a (ppl, xpl) pair, got ({ppl.role!r}, {xpl.role!r})")
    if ppl.pixels.shape[:2] != xpl.pixels.shape[:2]:
        raise ValueError(
            f"dimension mismatch: PPL is {ppl.pixels.shape[:2]}, XPL is {xpl.pixels.shape[:2]}"
        )
    if ppl.normalized != xpl.normalized:
        raise ValueError("cannot stack a normalized image with a raw one")
    stacked = np.concatenate([ppl.pixels, xpl.pixels], axis=2)
    return RasterImage(stacked, ROLE_COMPOSITE6, normalized=ppl.normalized)


def split_composite(composite: RasterImage) -> tuple[RasterImage, RasterImage]:
    """Inverse of stack_layers; recovers the PPL and XPL images bit-exactly."""
    if composite.role != ROLE_COMPOSITE6:
        raise ValueError(f"expected a composite6 raster, got {composite.role!r}")
    ppl = RasterImage(composite.pixels[:, :, :3].copy(), ROLE_PPL, composite.normalized)
    xpl = RasterImage(composite.pixels[:, :, 3:].copy(), ROLE_XPL, composite.normalized)
    return ppl, xpl


def _jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below ``tol`` (or it
    stops improving, which for a 6x6 happens at machine precision anyway).
    Returns (eigenvalues, eigenvector-columns), unsorted.
    """
    a = matrix.astype(np.float64).copy()
    k = a.shape[0]
    v = np.eye(k)

    def off_norm(m):
        return np.sqrt(max(np.sum(m**2) - np.sum(np.diag(m) ** 2), 0.0))

    prev = np.inf
    for _ in range(max_sweeps):
        off = off_norm(a)
        if off < tol or off >= prev:
            break
        prev = off
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) + 100.0 * abs(apq) == abs(diff):
                    t = apq / diff  # rotation angle vanishes, first-order tangent
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.hypot(theta, 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    return np.diag(a).copy(), v


def pca_fit(composite: RasterImage) -> PcaModel:
    """Fit a PCA treating every pixel of the 6-channel composite as an observation.

    Covariance uses the N-1 divisor; eigenvalues come back sorted descending
    with tiny negative round-off clamped to zero.
    """
    if composite.role != ROLE_COMPOSITE6:
        raise ValueError(f"PCA expects a composite6 raster, got {composite.role!r}")
    x = composite.pixels.reshape(-1, 6).astype(np.float64)
    n = x.shape[0]
    if n < 7:
        raise ValueError(f"PCA needs more pixels than channels, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = _jacobi_eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.maximum(eigenvalues[order], 0.0)
    eigenvectors = eigenvectors[:, order]
    for j in range(6):
        col = eigenvectors[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigenvectors[:, j] = -col
    return PcaModel(mean=mean, eigenvectors=eigenvectors, eigenvalues=eigenvalues)


def pca_project_ci(composite: RasterImage, model: PcaModel) -> RasterImage:
    """Project onto the first three principal components and build the CI.

    Each CI channel is min-max rescaled to [0, 1] over the image; a
    zero-range channel maps to all zeros.
    """
    if composite.role != ROLE_COMPOSITE6:
        raise ValueError(f"projection expects a composite6 raster, got {composite.role!r}")
    h, w = composite.pixels.shape[:2]
    x = composite.pixels.reshape(-1, 6).astype(np.float64)
    scores = (x - model.mean) @ model.eigenvectors[:, :3]
    lo = scores.min(axis=0)
    hi = scores.max(axis=0)
    span = hi - lo
    out = np.zeros_like(scores)
    nonzero = span > 0
    out[:, nonzero] = (scores[:, nonzero] - lo[nonzero]) / span[nonzero]
    return RasterImage(out.reshape(h, w, 3), ROLE_CI, normalized=True, equalized=True)


def normalize(image: RasterImage) -> RasterImage:
    """Scale 8-bit samples into [0, 1]; already-normalized images pass through."""
    if image.normalized:
        return image
    return replace(image, pixels=image.pixels.astype(np.float64) / 255.0, normalized=True)


def preprocess_pair(
    ppl: RasterImage, xpl: RasterImage, ci: RasterImage | None = None
) -> tuple[RasterImage, RasterImage, RasterImage]:
    """Run the full per-section pipeline on one PPL/XPL pair.

    Equalizes first, then stacks, fits the per-image PCA and projects the
    CI, then normalizes. A pre-computed CI (e.g. loaded from a processed
    corpus) short-circuits the PCA stage.
    """
    if not (ppl.equalized or ppl.normalized):
        ppl = histogram_equalize(ppl)
    if not (xpl.equalized or xpl.normalized):
        xpl = histogram_equalize(xpl)
    if ci is None:
        composite = stack_layers(ppl, xpl)
        ci = pca_project_ci(composite, pca_fit(composite))
    return normalize(ppl), normalize(xpl), normalize(ci)


# ---------------------------------------------------------------------------
# Raster file I/O: binary PPM/PGM payload + text sidecar.
# ---------------------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def save_raster(image: RasterImage, path: str | Path) -> None:
    """Write a raster as binary PPM plus its ``.meta`` sidecar.

    Normalized samples are quantized to 8 bits (round(v * 255)); loading a
    file written this way and saving it again reproduces identical bytes.
    """
    path = Path(path)
    if image.channels != 3:
        raise ValueError(f"raster files hold 3 channels, not {image.channels}")
    magic = b"P6"
    if image.normalized:
        payload = np.rint(image.pixels * 255.0).astype(np.uint8)
    else:
        payload = image.pixels
    header = magic + f"\n{image.width} {image.height}\n255\n".encode("ascii")
    path.write_bytes(header + payload.tobytes())
    meta = (
        f"role={image.role}\n"
        f"normalized={int(image.normalized)}\n"
        f"equalized={int(image.equalized)}\n"
    )
    _meta_path(path).write_text(meta, encoding="utf-8")


def load_raster(path: str | Path) -> RasterImage:
    """Read a raster written by save_raster (binary PPM + sidecar)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    channels = 3
    # Header: magic, width, height, maxval as whitespace-separated tokens.
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    expected = width * height * channels
    if len(raw) - pos < expected:
        raise ValueError(f"{path}: truncated pixel payload")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    pixels = data.reshape(height, width, channels)

    meta_file = _meta_path(path)
    role = ROLE_PPL if channels == 3 else ROLE_CI
    normalized = False
    equalized = False
    if meta_file.exists():
        meta = dict(
            line.split("=", 1)
            for line in meta_file.read_text(encoding="utf-8").splitlines()
            if line.strip()
        )
        role = meta.get("role", role)
        normalized = meta.get("normalized", "0") == "1"
        equalized = meta.get("equalized", "0") == "1"
    if normalized:
        return RasterImage(pixels.astype(np.float64) / 255.0, role, True, equalized)
    return RasterImage(pixels.copy(), role, False, equalized)
