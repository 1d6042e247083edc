"""Integrated-gradients attribution with completeness and alignment scoring.

The path integral runs from a baseline image (black by default) to the
input along the straight line, sampling gradients of the target class's
pre-softmax logit at midpoint quadrature nodes.  Any model exposing
``logit_gradients(batch, target) -> (values, grads)`` can be attributed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError
from .tensorcore import NonFinite, ShapeMismatch


class MissingMask(DataError):
    pass


@dataclass
class AttributionRequest:
    model: object                      # anything with logit_gradients(batch, target)
    x: np.ndarray                      # (C, S, S) input image
    baseline: np.ndarray | None = None  # defaults to the all-zeros black image
    steps: int = 64
    target: int = 0


@dataclass
class AttributionMap:
    attributions: np.ndarray           # same shape as the input
    f_input: float                     # target logit at the input
    f_baseline: float                  # target logit at the baseline
    completeness_residual: float       # |sum(attributions) - (f_input - f_baseline)|
    steps: int


def integrated_gradients(req: AttributionRequest, chunk_size: int = 32) -> AttributionMap:
    """Midpoint-rule path integration of input gradients.

    attribution_i = (x_i - x'_i) * mean_k grad_i F(x' + (k - 1/2)/m (x - x'))
    """
    x = np.asarray(req.x, dtype=np.float32)
    baseline = (np.zeros_like(x) if req.baseline is None
                else np.asarray(req.baseline, dtype=np.float32))
    if baseline.shape != x.shape:
        raise ShapeMismatch(f"baseline shape {baseline.shape} != input shape {x.shape}")
    if req.steps < 1:
        raise ValueError(f"steps must be >= 1, got {req.steps}")
    m = int(req.steps)
    diff = x - baseline
    grad_sum = np.zeros(x.shape, dtype=np.float64)
    alphas = (np.arange(m, dtype=np.float64) + 0.5) / m
    for start in range(0, m, chunk_size):
        chunk = alphas[start : start + chunk_size]
        batch = baseline[None] + chunk[:, None, None, None].astype(np.float32) * diff[None]
        _, grads = req.model.logit_gradients(batch, req.target)
        grad_sum += grads.astype(np.float64).sum(axis=0)
    attributions = diff.astype(np.float64) * (grad_sum / m)
    endpoints, _ = req.model.logit_gradients(np.stack([baseline, x]), req.target)
    f_baseline, f_input = float(endpoints[0]), float(endpoints[1])
    if not np.all(np.isfinite(attributions)):
        raise NonFinite("integrated gradients produced non-finite attributions")
    residual = abs(float(attributions.sum()) - (f_input - f_baseline))
    return AttributionMap(attributions=attributions, f_input=f_input,
                          f_baseline=f_baseline, completeness_residual=residual, steps=m)


def completeness_check(amap: AttributionMap, tol_fraction: float = 0.01) -> bool:
    """Pass iff the residual is within tol_fraction of the logit difference."""
    scale = max(abs(amap.f_input - amap.f_baseline), 1e-8)
    return amap.completeness_residual <= tol_fraction * scale


def dilate_mask(mask: np.ndarray, pixels: int = 2) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if pixels <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, iterations=pixels)


def beam_alignment_score(amap: AttributionMap, beam_mask: np.ndarray | None,
                         dilation: int = 2) -> float:
    """Fraction of absolute attribution mass inside the dilated beam mask.

    All-zero attribution maps score 0.0 by convention.
    """
    if beam_mask is None:
        raise MissingMask("beam_alignment_score needs a synthetic ground-truth mask")
    mass = np.abs(amap.attributions)
    if mass.ndim == 3:
        mass = mass.sum(axis=0)
    if mass.shape != beam_mask.shape:
        raise ShapeMismatch(f"attribution {mass.shape} and mask {beam_mask.shape} differ")
    total = float(mass.sum())
    if total == 0.0:
        return 0.0
    dilated = dilate_mask(beam_mask, dilation)
    return float(mass[dilated].sum()) / total


def mask_area_fraction(beam_mask: np.ndarray, dilation: int = 2) -> float:
    """Expected-mass baseline: the dilated mask's share of the image."""
    return float(dilate_mask(beam_mask, dilation).mean())


# --- rendering ----------------------------------------------------------------

_POS_COLOR = np.array([0.84, 0.12, 0.09])   # positive attribution tint
_NEG_COLOR = np.array([0.09, 0.28, 0.82])   # negative attribution tint


def render_heatmap(amap: AttributionMap, underlay: np.ndarray, png_path) -> Path:
    """Diverging overlay on the grayscale underlay plus a JSON sidecar.

    The palette and encoder settings are fixed, so re-rendering the same
    map is byte-identical.
    """
    attr = amap.attributions
    if attr.ndim == 3:
        attr = attr.sum(axis=0)
    under = np.asarray(underlay, dtype=np.float64)
    if under.ndim == 3:
        under = under[:, :, 0] if under.shape[2] == 1 else under.mean(axis=2)
    if under.shape != attr.shape:
        raise ShapeMismatch(f"underlay {under.shape} and attributions {attr.shape} differ")
    peak = np.abs(attr).max()
    signed = attr / peak if peak > 0 else np.zeros_like(attr)
    alpha = np.abs(signed) ** 0.7
    color = np.where(signed[..., None] >= 0,
                     _POS_COLOR[None, None, :], _NEG_COLOR[None, None, :])
    gray = np.clip(under, 0.0, 1.0)[..., None]
    rgb = gray * (1.0 - 0.85 * alpha[..., None]) + color * (0.85 * alpha[..., None])
    out = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(png_path, format="PNG")
    sidecar = {
        "f_input": amap.f_input,
        "f_baseline": amap.f_baseline,
        "completeness_residual": amap.completeness_residual,
        "steps": amap.steps,
    }
    png_path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return png_path
