"""Image ingestion and the preprocessing pipeline: tile, augment, resize, split."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

HAZARD = "hazard"
NONHAZARD = "nonhazard"


class UnsupportedFormat(DataError):
    pass


class DecodeError(DataError):
    pass


class TooSmall(DataError):
    pass


class InsufficientGroups(DataError):
    pass


@dataclass
class ImageSample:
    """One image with pixels in [0, 1], shaped (H, W, C)."""

    pixels: np.ndarray
    label: str
    source_id: str
    tile_index: int | None = None
    beam_mask: np.ndarray | None = None  # (H, W) bool, synthetic corpora only

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class SplitSpec:
    val_fraction: float = 0.20
    seed: int = 0
    stratify_by_label: bool = True
    group_by_source: bool = True  # tiles of one photo never straddle the split

    def validate(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


# --- loading ----------------------------------------------------------------

_SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reads binary PGM under its PPM codec


def load_image(path, label: str = "", source_id: str | None = None,
               grayscale: bool = True) -> ImageSample:
    """Decode an 8/16-bit PNG or binary PGM into pixels scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in _SUPPORTED_FORMATS:
                raise UnsupportedFormat(f"{path}: unsupported image format {fmt!r}")
            img.load()
            mode = img.mode
            if mode in ("I;16", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
                arr = arr[:, :, None]
            elif mode == "L":
                arr = np.asarray(img, dtype=np.float64) / 255.0
                arr = arr[:, :, None]
            elif mode in ("RGB", "RGBA"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
                if grayscale:
                    arr = (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])[:, :, None]
                else:
                    arr = rgb
            else:
                converted = img.convert("L")
                arr = np.asarray(converted, dtype=np.float64)[:, :, None] / 255.0
    except UnsupportedFormat:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from None
    arr = np.clip(arr, 0.0, 1.0)
    name = source_id if source_id is not None else _stem(path)
    return ImageSample(pixels=arr, label=label, source_id=name)


def _stem(path) -> str:
    from pathlib import Path

    return Path(path).stem


def save_image(path, pixels: np.ndarray) -> None:
    """Write pixels in [0, 1] as an 8-bit grayscale (or RGB) PNG."""
    arr = np.clip(pixels, 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


# --- tiling -----------------------------------------------------------------


def tile4(sample: ImageSample) -> list[ImageSample]:
    """Split into four row-major quadrants, dropping any odd trailing row/column."""
    h, w = sample.height, sample.width
    if h < 2 or w < 2:
        raise TooSmall(f"cannot tile a {h}x{w} image")
    h2, w2 = h // 2, w // 2
    tiles = []
    for idx, (r, c) in enumerate(((0, 0), (0, w2), (h2, 0), (h2, w2))):
        mask = None
        if sample.beam_mask is not None:
            mask = np.ascontiguousarray(sample.beam_mask[r : r + h2, c : c + w2])
        tiles.append(ImageSample(
            pixels=np.ascontiguousarray(sample.pixels[r : r + h2, c : c + w2]),
            label=sample.label,
            source_id=sample.source_id,
            tile_index=idx,
            beam_mask=mask,
        ))
    return tiles


# --- augmentation -----------------------------------------------------------


@dataclass
class AugmentParams:
    angle_deg: float
    hflip: bool
    brightness: float
    contrast: float
    saturation: float


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    """One draw of the training-time augmentation distribution."""
    return AugmentParams(
        angle_deg=float(rng.uniform(0.0, 15.0)),
        hflip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        saturation=float(rng.uniform(0.8, 1.2)),
    )


def apply_augment(sample: ImageSample, params: AugmentParams) -> ImageSample:
    """Rotate (bilinear, black fill), maybe flip, then jitter photometrics."""
    px = sample.pixels
    mask = sample.beam_mask
    if params.angle_deg != 0.0:
        px = ndimage.rotate(px, params.angle_deg, axes=(1, 0), reshape=False,
                            order=1, mode="constant", cval=0.0, prefilter=False)
        if mask is not None:
            mask = ndimage.rotate(mask.astype(np.uint8), params.angle_deg, axes=(1, 0),
                                  reshape=False, order=0, mode="constant", cval=0,
                                  prefilter=False).astype(bool)
    else:
        px = px.copy()
        mask = None if mask is None else mask.copy()
    if params.hflip:
        px = px[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    px = px * params.brightness
    if params.contrast != 1.0:
        mean = px.mean()
        px = mean + (px - mean) * params.contrast
    if params.saturation != 1.0 and px.shape[2] >= 3:
        luma = (0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2])[:, :, None]
        px = luma + (px - luma) * params.saturation
    px = np.clip(px, 0.0, 1.0)
    return replace(sample, pixels=np.ascontiguousarray(px),
                   beam_mask=None if mask is None else np.ascontiguousarray(mask))


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    return apply_augment(sample, draw_augment_params(rng))


# --- resizing ---------------------------------------------------------------


def _bilinear_axis_coords(n_in: int, n_out: int):
    # half-pixel-center convention: output i samples input at (i + .5) * n_in/n_out - .5
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def resize(sample: ImageSample, side: int = 224) -> ImageSample:
    """Bilinear resample to side x side; masks travel by nearest neighbor."""
    h, w = sample.height, sample.width
    if h < 2 or w < 2:
        raise TooSmall(f"cannot resize a {h}x{w} image")
    if side < 1:
        raise ValueError(f"target side must be positive, got {side}")
    if h == side and w == side:
        return replace(sample, pixels=sample.pixels.copy(),
                       beam_mask=None if sample.beam_mask is None else sample.beam_mask.copy())
    y0, y1, fy = _bilinear_axis_coords(h, side)
    x0, x1, fx = _bilinear_axis_coords(w, side)
    px = sample.pixels
    tl = px[np.ix_(y0, x0)]
    tr = px[np.ix_(y0, x1)]
    bl = px[np.ix_(y1, x0)]
    br = px[np.ix_(y1, x1)]
    fxc = fx[None, :, None]
    top = tl + fxc * (tr - tl)      # lerp form keeps constants exact
    bot = bl + fxc * (br - bl)
    out = top + fy[:, None, None] * (bot - top)
    mask = None
    if sample.beam_mask is not None:
        yn = np.clip(np.round((np.arange(side) + 0.5) * (h / side) - 0.5), 0, h - 1).astype(np.intp)
        xn = np.clip(np.round((np.arange(side) + 0.5) * (w / side) - 0.5), 0, w - 1).astype(np.intp)
        mask = sample.beam_mask[np.ix_(yn, xn)]
    return replace(sample, pixels=np.ascontiguousarray(out),
                   beam_mask=None if mask is None else np.ascontiguousarray(mask))


# --- splitting --------------------------------------------------------------


def split(samples: list[ImageSample], spec: SplitSpec) -> tuple[list[ImageSample], list[ImageSample]]:
    """Deterministic train/validation split, stratified and group-preserving.

    Group mode holds out round(val_fraction * n_groups) whole source groups
    per stratum; tile mode holds out floor(val_fraction * n) individual
    samples (floor keeps an 80/20 split of 332/664 tiles at 266/66 and
    532/132).
    """
    spec.validate()
    if not samples:
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_by_label:
        strata = sorted({s.label for s in samples})
    else:
        strata = [None]
    val_keys: set = set()
    for stratum in strata:
        members = [s for s in samples if stratum is None or s.label == stratum]
        if spec.group_by_source:
            groups = sorted({s.source_id for s in members})
            if len(groups) < 2:
                raise InsufficientGroups(
                    f"stratum {stratum!r} has {len(groups)} source group(s); need >= 2")
            order = list(rng.permutation(len(groups)))
            n_val = min(max(1, round(spec.val_fraction * len(groups))), len(groups) - 1)
            val_keys.update(("group", groups[i]) for i in order[:n_val])
        else:
            idxs = [i for i, s in enumerate(samples) if stratum is None or s.label == stratum]
            order = list(rng.permutation(len(idxs)))
            n_val = int(spec.val_fraction * len(idxs))
            val_keys.update(("sample", idxs[i]) for i in order[:n_val])
    train, val = [], []
    for i, s in enumerate(samples):
        in_val = ("group", s.source_id) in val_keys or ("sample", i) in val_keys
        (val if in_val else train).append(s)
    return train, val
