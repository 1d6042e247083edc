"""Synthetic roof-texture corpora.

Safe images are smooth correlated noise; hazardous images add dark
elongated streaks whose darkness and width grow with a per-streak depth,
oriented around a principal heading.  A boolean mask records streak
pixels so attribution quality can be scored against ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import HAZARD, NONHAZARD, ImageSample, load_image, save_image
from .errors import DataError, InvalidConfig


@dataclass
class SynthConfig:
    image_size: int = 128
    beam_count_mean: float = 2.8          # Poisson mean streaks per hazardous image
    depth_range: tuple[float, float] = (1.0, 2.6)  # map units, within [0, 3]
    principal_orientation_deg: float = 35.0
    orientation_sd_deg: float = 10.0
    base_noise_amplitude: float = 0.08
    base_noise_correlation: float = 4.0   # gaussian blur sigma, pixels
    background_level: float = 0.55
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise InvalidConfig(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.depth_range
        if not (0.0 <= lo <= hi <= 3.0):
            raise InvalidConfig(f"depth_range must be ordered and within [0, 3], got {self.depth_range}")
        if not self.beam_count_mean > 0:
            raise InvalidConfig(f"beam_count_mean must be positive, got {self.beam_count_mean}")
        if self.base_noise_amplitude < 0 or self.base_noise_correlation <= 0:
            raise InvalidConfig("base noise amplitude must be >= 0 and correlation length > 0")


@dataclass
class BeamStreak:
    """One rendered streak: geometry plus depth-driven appearance."""

    anchor: tuple[float, float]
    orientation_deg: float
    half_length: float
    depth: float

    @property
    def width(self) -> float:
        return 1.2 + 1.0 * self.depth

    @property
    def darkness(self) -> float:
        return min(0.9, 0.35 * self.depth)


def _background(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    s = config.image_size
    noise = ndimage.gaussian_filter(rng.standard_normal((s, s)), config.base_noise_correlation)
    sd = noise.std()
    if sd > 0:
        noise /= sd
    level = config.background_level + rng.uniform(-0.04, 0.04)
    return np.clip(level + config.base_noise_amplitude * noise, 0.0, 1.0)


def draw_beam_streaks(rng: np.random.Generator, config: SynthConfig) -> list[BeamStreak]:
    """Sample the streak population for one hazardous image."""
    s = config.image_size
    lo, hi = config.depth_range
    streaks = []
    for _ in range(int(rng.poisson(config.beam_count_mean))):
        theta = float(rng.normal(config.principal_orientation_deg, config.orientation_sd_deg))
        depth = float(rng.uniform(lo, hi))
        anchor = (float(rng.uniform(0.15, 0.85) * s), float(rng.uniform(0.15, 0.85) * s))
        half_length = float(rng.uniform(0.45, 0.65) * s)
        streaks.append(BeamStreak(anchor=anchor, orientation_deg=theta,
                                  half_length=half_length, depth=depth))
    return streaks


def _render_streak(img: np.ndarray, mask: np.ndarray, streak: BeamStreak) -> None:
    if streak.depth <= 0.0 or streak.darkness <= 0.0:
        return
    s = img.shape[0]
    theta = np.deg2rad(streak.orientation_deg)
    dx, dy = np.cos(theta), np.sin(theta)
    ax, ay = streak.anchor
    x0, y0 = ax - streak.half_length * dx, ay - streak.half_length * dy
    x1, y1 = ax + streak.half_length * dx, ay + streak.half_length * dy
    yy, xx = np.mgrid[0:s, 0:s]
    # point-to-segment distance field over pixel centers
    vx, vy = x1 - x0, y1 - y0
    seg2 = vx * vx + vy * vy
    t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / seg2, 0.0, 1.0) if seg2 > 0 else 0.0
    dist = np.hypot(xx - (x0 + t * vx), yy - (y0 + t * vy))
    half_w = streak.width / 2.0
    core = dist <= half_w
    profile = np.clip(1.0 - (dist / (half_w + 1.0)) ** 2, 0.0, 1.0)
    img *= 1.0 - streak.darkness * profile
    # raking light casts a bright rim along the ledge beside the shadow core
    rim = np.exp(-(((dist - (half_w + 0.8)) / 0.7) ** 2))
    img += 0.5 * streak.darkness * rim
    mask |= core


def generate_synthetic(n_hazard: int, n_safe: int, config: SynthConfig) -> list[ImageSample]:
    """Build a labeled corpus of hazardous and safe textures, hazards first.

    Deterministic for a fixed config: image k always uses the stream
    keyed by (config.seed, k), so worker fan-out cannot change pixels.
    """
    config.validate()
    if n_hazard <= 0 or n_safe <= 0:
        raise InvalidConfig("image counts must be positive")
    return [synthesize_one(k, k < n_hazard, config)[0] for k in range(n_hazard + n_safe)]


def synthesize_one(index: int, hazardous: bool,
                   config: SynthConfig) -> tuple[ImageSample, list[BeamStreak]]:
    rng = np.random.default_rng([config.seed, index])
    img = _background(rng, config)
    mask = np.zeros(img.shape, dtype=bool)
    streaks: list[BeamStreak] = []
    if hazardous:
        pre_mean = img.mean()
        streaks = draw_beam_streaks(rng, config)
        for streak in streaks:
            _render_streak(img, mask, streak)
        # restore the global mean so overall brightness carries no label
        # signal; the classifier has to key on the local streak structure
        img += pre_mean - img.mean()
        img = np.clip(img, 0.0, 1.0)
    label = HAZARD if hazardous else NONHAZARD
    sample = ImageSample(pixels=img[:, :, None], label=label,
                         source_id=f"{label}_{index:05d}", beam_mask=mask)
    return sample, streaks


# --- source task: four texture families --------------------------------------

TEXTURE_FAMILIES = ("t0_smooth", "t1_grating", "t2_blobs", "t3_streaks")


def generate_texture_families(n_per_class: int, config: SynthConfig) -> list[ImageSample]:
    """A distinct 4-way classification corpus used to pretrain the backbone."""
    config.validate()
    if n_per_class <= 0:
        raise InvalidConfig("n_per_class must be positive")
    s = config.image_size
    samples = []
    for k in range(4 * n_per_class):
        family = k % 4
        rng = np.random.default_rng([config.seed, 7000001, k])
        img = _background(rng, config)
        # families 0 and 3 share the hazard corpus' contrast standardization
        # so the streak-vs-smooth discriminant transfers contrast-free
        target_std = float(rng.uniform(1.0, 1.5) * config.base_noise_amplitude)
        if family == 1:
            theta = rng.uniform(0.0, np.pi)
            wavelength = rng.uniform(6.0, 16.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            yy, xx = np.mgrid[0:s, 0:s]
            carrier = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength + phase)
            img = np.clip(img + 0.22 * carrier, 0.0, 1.0)
        elif family == 2:
            pre_mean = img.mean()
            for _ in range(int(rng.poisson(22.0)) + 4):
                cy, cx = rng.uniform(0, s, 2)
                sigma = rng.uniform(1.5, 4.0)
                yy, xx = np.mgrid[0:s, 0:s]
                img *= 1.0 - 0.5 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img = np.clip(img + (pre_mean - img.mean()), 0.0, 1.0)
        elif family == 3:
            pre_mean = img.mean()
            mask = np.zeros((s, s), dtype=bool)
            # same streak population as the hazard class, so the backbone's
            # family-3 detectors are directly reusable beam detectors
            for streak in draw_beam_streaks(rng, config):
                _render_streak(img, mask, streak)
            img += pre_mean - img.mean()
        if family in (0, 3):
            img = _standardize_contrast(img, target_std)
        samples.append(ImageSample(pixels=img[:, :, None], label=TEXTURE_FAMILIES[family],
                                   source_id=f"{TEXTURE_FAMILIES[family]}_{k:05d}"))
    return samples


# --- corpus directory layout --------------------------------------------------


@dataclass
class CorpusManifestRow:
    source_id: str
    label: str
    n_beams: int
    mean_depth: float
    image_size: int
    seed: int


def write_corpus(samples: list[ImageSample], root, workers: int = 1,
                 manifest_extra: list[CorpusManifestRow] | None = None) -> None:
    """Write <root>/<label>/*.png plus masks/ and manifest.tsv for synthetic images."""
    root = Path(root)
    labels = sorted({s.label for s in samples})
    for label in labels:
        (root / label).mkdir(parents=True, exist_ok=True)
    any_masks = any(s.beam_mask is not None for s in samples)
    if any_masks:
        (root / "masks").mkdir(parents=True, exist_ok=True)

    def _write_one(sample: ImageSample) -> None:
        save_image(root / sample.label / f"{sample.source_id}.png", sample.pixels)
        if sample.beam_mask is not None:
            save_image(root / "masks" / f"{sample.source_id}.png",
                       sample.beam_mask.astype(np.float64))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_write_one, samples))
    else:
        for sample in samples:
            _write_one(sample)

    with open(root / "manifest.tsv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["source_id", "label", "n_beams", "mean_depth", "image_size", "seed"])
        if manifest_extra is not None:
            for row in manifest_extra:
                writer.writerow([row.source_id, row.label, row.n_beams,
                                 f"{row.mean_depth:.4f}", row.image_size, row.seed])
        else:
            for s in samples:
                writer.writerow([s.source_id, s.label, "", "", s.pixels.shape[0], ""])


def generate_corpus(n_hazard: int, n_safe: int, config: SynthConfig, root,
                    workers: int = 1) -> list[ImageSample]:
    """Generate and persist a synthetic corpus; returns the in-memory samples."""
    config.validate()
    if n_hazard <= 0 or n_safe <= 0:
        raise InvalidConfig("image counts must be positive")
    samples = []
    rows = []
    for k in range(n_hazard + n_safe):
        sample, streaks = synthesize_one(k, k < n_hazard, config)
        depths = [st.depth for st in streaks if st.depth > 0]
        rows.append(CorpusManifestRow(
            source_id=sample.source_id, label=sample.label, n_beams=len(streaks),
            mean_depth=float(np.mean(depths)) if depths else 0.0,
            image_size=config.image_size, seed=config.seed))
        samples.append(sample)
    write_corpus(samples, root, workers=workers, manifest_extra=rows)
    return samples


def read_corpus(root, labels: tuple[str, ...] | None = None) -> list[ImageSample]:
    """Load a corpus directory; masks/<source_id>.png re-attach as boolean masks."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    if labels is None:
        labels = tuple(sorted(p.name for p in root.iterdir()
                              if p.is_dir() and p.name != "masks"))
    if not labels:
        raise DataError(f"corpus root {root} has no label directories")
    samples = []
    for label in labels:
        label_dir = root / label
        if not label_dir.is_dir():
            raise DataError(f"corpus root {root} is missing the {label!r} directory")
        for path in sorted(label_dir.glob("*.png")):
            sample = load_image(path, label=label)
            mask_path = root / "masks" / path.name
            if mask_path.exists():
                mask_img = load_image(mask_path, label=label)
                sample.beam_mask = mask_img.pixels[:, :, 0] > 0.5
            samples.append(sample)
    if not samples:
        raise DataError(f"corpus root {root} contains no images")
    return samples
