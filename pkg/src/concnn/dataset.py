"""Corpus handling: manifest ingestion plus a synthetic thin-section generator.

A corpus is described by a UTF-8 manifest, one image pair per line:

    section_id | rock_type | angle | ppl_path | xpl_path

Whole-line ``#`` comments and blank lines are skipped. A sixth column may
carry the path of a pre-computed comprehensive image, which lets a
processed corpus skip the PCA stage on re-ingestion. Relative paths are
resolved against the manifest's own directory.

The synthetic generator renders Voronoi grain mosaics: per class a PPL
palette, an XPL palette at a rotated hue, a grain-size range, and per-grain
XPL brightness that stands in for extinction. It exists so the pipeline can
be trained and evaluated at desk scale without any proprietary imagery.
"""

from __future__ import annotations

import colorsys
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .preprocess import ROLE_PPL, ROLE_XPL, RasterImage, load_raster, save_raster

CLASS_NAMES = (
    "andesite",
    "basalt",
    "diorite",
    "gabbro",
    "granite",
    "limestone",
    "peridotite",
    "phonolite",
    "rhyolite",
    "sandstone",
    "schist",
    "syenite",
    "tuff",
)
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


class ManifestError(ValueError):
    """Raised for malformed manifests; messages cite file and line number."""


@dataclass
class ImagePair:
    """One capture of a section at a fixed stage rotation."""

    angle: int
    ppl_path: Path
    xpl_path: Path
    ci_path: Path | None = None


@dataclass
class SectionRecord:
    """One thin section: identity, label, and its captures ordered by angle."""

    section_id: str
    rock_type: str
    images: list[ImagePair] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.rock_type not in CLASS_INDEX:
            raise ValueError(f"unknown rock type {self.rock_type!r}")

    @property
    def label(self) -> int:
        return CLASS_INDEX[self.rock_type]


def _resolve(base: Path, text: str) -> Path:
    p = Path(text)
    if not p.is_absolute():
        p = base / p
    return Path(os.path.abspath(p))


def ingest_manifest(path: str | Path) -> list[SectionRecord]:
    """Parse and validate a corpus manifest.

    Returns sections in first-appearance order with image pairs sorted by
    angle. Unknown classes, missing files, malformed rows, conflicting
    labels and duplicate (section, angle) entries all raise ManifestError
    naming the offending line. An empty manifest yields [] with a warning.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    base = path.parent
    records: dict[str, SectionRecord] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) not in (5, 6):
            raise ManifestError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(fields)}")
        section_id, rock_type, angle_text = fields[0], fields[1], fields[2]
        if not section_id:
            raise ManifestError(f"{path}:{lineno}: empty section id")
        if rock_type not in CLASS_INDEX:
            raise ManifestError(f"{path}:{lineno}: unknown rock type {rock_type!r}")
        try:
            angle = int(angle_text)
        except ValueError:
            raise ManifestError(
                f"{path}:{lineno}: angle must be an integer, got {angle_text!r}"
            ) from None
        key = (section_id, angle)
        if key in seen:
            raise ManifestError(
                f"{path}:{lineno}: duplicate entry for section {section_id!r} at angle {angle}"
            )
        seen.add(key)
        paths = [_resolve(base, fields[i]) for i in range(3, len(fields))]
        for p in paths:
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: image file not found: {p}")
        record = records.get(section_id)
        if record is None:
            record = SectionRecord(section_id, rock_type)
            records[section_id] = record
        elif record.rock_type != rock_type:
            raise ManifestError(
                f"{path}:{lineno}: section {section_id!r} already labeled "
                f"{record.rock_type!r}, cannot relabel as {rock_type!r}"
            )
        ci_path = paths[2] if len(paths) == 3 else None
        record.images.append(ImagePair(angle, paths[0], paths[1], ci_path))
    if not records:
        warnings.warn(f"manifest {path} lists no sections", stacklevel=2)
    for record in records.values():
        record.images.sort(key=lambda pair: pair.angle)
    return list(records.values())


def write_manifest(records: list[SectionRecord], path: str | Path) -> None:
    """Write records as a manifest, with paths relative to the manifest itself.

    Relative paths keep an output directory relocatable; re-ingesting the
    file recovers the records exactly.
    """
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        return os.path.relpath(p, base)

    lines = ["# section_id | rock_type | angle | ppl_path | xpl_path [| ci_path]"]
    for record in records:
        for pair in record.images:
            cells = [
                record.section_id,
                record.rock_type,
                str(pair.angle),
                rel(pair.ppl_path),
                rel(pair.xpl_path),
            ]
            if pair.ci_path is not None:
                cells.append(rel(pair.ci_path))
            lines.append(" | ".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic corpus generation.
# ---------------------------------------------------------------------------

Palette = tuple[tuple[float, float, float], ...]


def _default_palette(hue: float, xpl: bool) -> Palette:
    if xpl:
        variants = ((hue, 0.85, 0.90), (hue, 0.60, 0.60), ((hue + 0.05) % 1.0, 0.90, 0.40))
    else:
        variants = ((hue, 0.65, 0.95), (hue, 0.45, 0.75), ((hue + 0.04) % 1.0, 0.80, 0.55))
    return tuple(colorsys.hsv_to_rgb(h, s, v) for h, s, v in variants)


@dataclass
class SynthConfig:
    """Parameters of the synthetic corpus.

    Classes take the first ``num_classes`` canonical rock names. Palettes
    and grain-size ranges default to per-class values spread far enough
    apart that the classes stay learnable; ``angles`` simulates capturing
    each section at several stage rotations (XPL extinction is re-drawn
    per angle, PPL is rotation-invariant here).
    """

    num_classes: int = 2
    sections_per_class: int = 3
    image_size: int = 448
    angles: tuple[int, ...] = (0,)
    grain_scale_ranges: tuple[tuple[float, float], ...] = ()
    ppl_palettes: tuple[Palette, ...] = ()
    xpl_palettes: tuple[Palette, ...] = ()
    noise_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if self.sections_per_class < 1:
            raise ValueError("sections_per_class must be positive")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not self.angles:
            raise ValueError("at least one rotation angle is required")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        k = self.num_classes
        if not self.grain_scale_ranges:
            # Disjoint per-class ranges: grain size must survive the per-image
            # equalization and PCA applied downstream, so it carries most of
            # the class signal and the ranges cannot be allowed to overlap.
            self.grain_scale_ranges = tuple((5.0 + 6.0 * i, (5.0 + 6.0 * i) * 1.3) for i in range(k))
        if not self.ppl_palettes:
            self.ppl_palettes = tuple(_default_palette(i / k, xpl=False) for i in range(k))
        if not self.xpl_palettes:
            self.xpl_palettes = tuple(_default_palette((i / k + 1 / 3) % 1.0, xpl=True) for i in range(k))
        for name, seq in (
            ("grain_scale_ranges", self.grain_scale_ranges),
            ("ppl_palettes", self.ppl_palettes),
            ("xpl_palettes", self.xpl_palettes),
        ):
            if len(seq) != k:
                raise ValueError(f"{name} must list one entry per class ({k})")
        for lo, hi in self.grain_scale_ranges:
            if not 0 < lo <= hi:
                raise ValueError("grain scale ranges must satisfy 0 < lo <= hi")
        for palettes in (self.ppl_palettes, self.xpl_palettes):
            if len(set(palettes)) != k:
                raise ValueError("every class needs a distinct palette")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.num_classes]


def _render_section(config: SynthConfig, class_index: int, section_index: int, out_dir: Path):
    """Render one section at every configured angle; returns its record."""
    rock = CLASS_NAMES[class_index]
    ordinal = class_index * config.sections_per_class + section_index
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, ordinal]))
    size = config.image_size

    lo, hi = config.grain_scale_ranges[class_index]
    diameter = rng.uniform(lo, hi)
    n_grains = max(4, int(round(size * size / diameter**2)))
    centers = rng.uniform(0.0, size, size=(n_grains, 2))
    ys, xs = np.indices((size, size))
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    labels = cKDTree(centers).query(coords)[1]

    def grain_colors(palette: Palette) -> np.ndarray:
        # Tilt the variant mix by class: histogram equalization erases
        # absolute color levels but not area proportions, so a skewed mix
        # leaves a per-class signature in the equalized images.
        weights = np.where(np.arange(len(palette)) == class_index % len(palette), 2.5, 1.0)
        variants = rng.choice(len(palette), size=n_grains, p=weights / weights.sum())
        base = np.asarray(palette)[variants]
        return np.clip(base + rng.normal(0.0, 0.03, size=(n_grains, 3)), 0.0, 1.0)

    ppl_colors = grain_colors(config.ppl_palettes[class_index])
    xpl_base = grain_colors(config.xpl_palettes[class_index])

    def quantize(float_pixels: np.ndarray, noise_rng: np.random.Generator) -> np.ndarray:
        counts = float_pixels.reshape(size, size, 3) * 255.0
        if config.noise_sigma > 0:
            counts = counts + noise_rng.normal(0.0, config.noise_sigma, counts.shape)
        return np.clip(np.rint(counts), 0, 255).astype(np.uint8)

    section_id = f"{rock}_{section_index:02d}"
    ppl_pixels = quantize(ppl_colors[labels], rng)
    record = SectionRecord(section_id, rock)
    for angle_index, angle in enumerate(config.angles):
        angle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, ordinal, angle_index]))
        extinction = angle_rng.uniform(0.25, 1.0, size=n_grains)
        xpl_pixels = quantize((xpl_base * extinction[:, None])[labels], angle_rng)
        ppl_path = Path(os.path.abspath(out_dir / f"{section_id}_a{angle:03d}_ppl.ppm"))
        xpl_path = Path(os.path.abspath(out_dir / f"{section_id}_a{angle:03d}_xpl.ppm"))
        save_raster(RasterImage(ppl_pixels, ROLE_PPL), ppl_path)
        save_raster(RasterImage(xpl_pixels, ROLE_XPL), xpl_path)
        record.images.append(ImagePair(angle, ppl_path, xpl_path))
    return record


def generate_synthetic(
    config: SynthConfig, out_dir: str | Path, threads: int = 1
) -> list[SectionRecord]:
    """Render the synthetic corpus into ``out_dir``.

    Output depends only on the config: every section derives its own random
    stream from (seed, section ordinal), so results are identical whatever
    the thread count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (class_index, section_index)
        for class_index in range(config.num_classes)
        for section_index in range(config.sections_per_class)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda t: _render_section(config, *t, out_dir), tasks))
    else:
        records = [_render_section(config, *t, out_dir) for t in tasks]
    return records


def mean_color_separation(records: list[SectionRecord]) -> float:
    """Smallest pairwise distance between per-class mean PPL colors.

    A healthy synthetic corpus keeps this comfortably above zero; it is the
    cheap proxy for "the classes are visually learnable".
    """
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for record in records:
        for pair in record.images:
            pixels = load_raster(pair.ppl_path).pixels.astype(np.float64) / 255.0
            sums[record.rock_type] = sums.get(record.rock_type, 0) + pixels.mean(axis=(0, 1))
            counts[record.rock_type] = counts.get(record.rock_type, 0) + 1
    if len(sums) < 2:
        raise ValueError("need at least two classes to measure separation")
    means = [sums[name] / counts[name] for name in sorted(sums)]
    best = np.inf
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            best = min(best, float(np.linalg.norm(means[i] - means[j])))
    return best
