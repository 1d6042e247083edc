"""Beam-map parsing, circle-neighborhood summaries, and t-test machinery.

Maps are JSON documents with three arrays: ``beams`` (each a polyline with
``points`` [[x, y], ...] in meters and ``depth_ticks`` [d, ...] in map
units), ``falls`` [[x, y], ...], and ``controls`` [[x, y], ...].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


class ParseError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroVariance(DataError):
    pass


class InvalidDf(DataError):
    pass


@dataclass
class Beam:
    points: list[tuple[float, float]]
    depth_ticks: list[float]


@dataclass
class BeamMap:
    beams: list[Beam] = field(default_factory=list)
    falls: list[tuple[float, float]] = field(default_factory=list)
    controls: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class CircleStats:
    center: tuple[float, float]
    radius: float
    frequency: int
    mean_depth: float | None  # None when no counted beam carries a tick


@dataclass
class GroupSummary:
    n: int
    mean: float
    sd: float  # sample standard deviation, n-1 denominator

    @classmethod
    def from_values(cls, values) -> "GroupSummary":
        vals = [float(v) for v in values]
        n = len(vals)
        if n < 2:
            raise ValueError(f"a group summary needs n >= 2, got {n}")
        mean = sum(vals) / n
        var = sum((v - mean) ** 2 for v in vals) / (n - 1)
        return cls(n=n, mean=mean, sd=math.sqrt(var))


@dataclass
class TTestResult:
    kind: str  # "paired" | "welch"
    t: float
    df: float
    p_two_sided: float
    group_a: GroupSummary
    group_b: GroupSummary


# --- map I/O ----------------------------------------------------------------


def _as_point(value, where: str) -> tuple[float, float]:
    if (not isinstance(value, (list, tuple))) or len(value) != 2:
        raise ParseError(f"{where}: expected an [x, y] pair, got {value!r}")
    x, y = value
    try:
        x, y = float(x), float(y)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: coordinates must be numbers, got {value!r}") from None
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ParseError(f"{where}: coordinates must be finite, got {value!r}")
    return (x, y)


def parse_beam_map(path) -> BeamMap:
    """Read and validate a beam-map JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    beams = []
    for i, raw in enumerate(doc.get("beams", [])):
        where = f"beams[{i}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{where}: expected an object with points and depth_ticks")
        points = [_as_point(p, f"{where}.points[{j}]") for j, p in enumerate(raw.get("points", []))]
        if not points:
            raise ParseError(f"{where}: a beam needs at least one point")
        ticks = []
        for j, d in enumerate(raw.get("depth_ticks", [])):
            try:
                d = float(d)
            except (TypeError, ValueError):
                raise ParseError(f"{where}.depth_ticks[{j}]: not a number: {d!r}") from None
            if not math.isfinite(d) or d < 0:
                raise ParseError(f"{where}.depth_ticks[{j}]: depth ticks must be >= 0, got {d!r}")
            ticks.append(d)
        beams.append(Beam(points=points, depth_ticks=ticks))
    falls = [_as_point(p, f"falls[{i}]") for i, p in enumerate(doc.get("falls", []))]
    controls = [_as_point(p, f"controls[{i}]") for i, p in enumerate(doc.get("controls", []))]
    return BeamMap(beams=beams, falls=falls, controls=controls)


def write_beam_map(bmap: BeamMap, path) -> None:
    doc = {
        "beams": [{"points": [list(p) for p in b.points], "depth_ticks": list(b.depth_ticks)}
                  for b in bmap.beams],
        "falls": [list(p) for p in bmap.falls],
        "controls": [list(p) for p in bmap.controls],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# --- geometry ---------------------------------------------------------------


def point_segment_distance(p, a, b) -> float:
    """Shortest distance from point p to the segment a-b."""
    px, py = p
    ax, ay = a
    bx, by = b
    abx, aby = bx - ax, by - ay
    ab2 = abx * abx + aby * aby
    if ab2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * abx + (py - ay) * aby) / ab2
    t = max(0.0, min(1.0, t))
    return math.hypot(px - (ax + t * abx), py - (ay + t * aby))


def beam_intersects_disc(beam: Beam, center, radius: float) -> bool:
    """Closed-disc test: any polyline segment within ``radius`` of center counts."""
    pts = beam.points
    if len(pts) == 1:
        return math.hypot(pts[0][0] - center[0], pts[0][1] - center[1]) <= radius
    return any(point_segment_distance(center, pts[i], pts[i + 1]) <= radius
               for i in range(len(pts) - 1))


def circle_stats(bmap: BeamMap, center, radius: float = 9.0) -> CircleStats:
    """Count beams whose polyline touches the closed disc and pool their depth ticks."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    center = (float(center[0]), float(center[1]))
    ticks: list[float] = []
    frequency = 0
    for beam in bmap.beams:
        if beam_intersects_disc(beam, center, radius):
            frequency += 1
            ticks.extend(beam.depth_ticks)
    mean_depth = sum(ticks) / len(ticks) if ticks else None
    return CircleStats(center=center, radius=radius, frequency=frequency, mean_depth=mean_depth)


# --- Student-t machinery ----------------------------------------------------

_BETA_EPS = 1e-15
_BETA_FPMIN = 1e-300
_BETA_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_FPMIN:
        d = _BETA_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_FPMIN:
            d = _BETA_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETA_FPMIN:
            c = _BETA_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_FPMIN:
            d = _BETA_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETA_FPMIN:
            c = _BETA_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _ln_beta(a: float, b: float) -> float:
    """ln B(a, b); the large-argument branch avoids lgamma cancellation."""
    if a < b:
        a, b = b, a
    if a >= 1e4:
        # lgamma(a+b) - lgamma(a) via a Stirling-series difference
        diff = (b * math.log(a) + (a + b - 0.5) * math.log1p(b / a) - b
                - b / (12.0 * a * (a + b))
                + (1.0 / (360.0 * a ** 3) - 1.0 / (360.0 * (a + b) ** 3)))
        return math.lgamma(b) - diff
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _incomplete_beta_xc(a: float, b: float, x: float, xc: float) -> float:
    """I_x(a, b) given both x and its exactly computed complement xc = 1 - x."""
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    ln_front = -_ln_beta(a, b) + a * math.log1p(-xc) + b * math.log(xc)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    return _incomplete_beta_xc(a, b, x, 1.0 - x)


def t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t via the regularized incomplete beta."""
    if not df > 0:
        raise InvalidDf(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    t2 = t * t
    # x and its complement both formed directly from (df, t*t) so neither
    # suffers cancellation when one of them is tiny
    x = df / (df + t2)
    xc = t2 / (df + t2)
    half_tail = 0.5 * _incomplete_beta_xc(0.5 * df, 0.5, x, xc)
    return 1.0 - half_tail if t > 0 else half_tail


def two_sided_p(t: float, df: float) -> float:
    return 2.0 * (1.0 - t_cdf(abs(t), df))


def paired_t(a, b) -> TTestResult:
    """Paired t-test on per-pair differences, df = n - 1."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) != len(b):
        raise LengthMismatch(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    diffs = [x - y for x, y in zip(a, b)]
    mean_d = sum(diffs) / n
    var_d = sum((d - mean_d) ** 2 for d in diffs) / (n - 1)
    if var_d == 0.0:
        if mean_d == 0.0:
            # identical pairs everywhere: no evidence of a difference
            return TTestResult("paired", 0.0, float(n - 1), 1.0,
                               GroupSummary.from_values(a), GroupSummary.from_values(b))
        raise ZeroVariance("difference variance is zero with a nonzero mean difference")
    t = mean_d / math.sqrt(var_d / n)
    df = float(n - 1)
    return TTestResult("paired", t, df, two_sided_p(t, df),
                       GroupSummary.from_values(a), GroupSummary.from_values(b))


def welch_t(summary_a: GroupSummary, summary_b: GroupSummary) -> TTestResult:
    """Unequal-variance two-sample test with Welch-Satterthwaite df."""
    va = summary_a.sd ** 2 / summary_a.n
    vb = summary_b.sd ** 2 / summary_b.n
    if va == 0.0 and vb == 0.0:
        if summary_a.mean == summary_b.mean:
            return TTestResult("welch", 0.0, float(summary_a.n + summary_b.n - 2), 1.0,
                               summary_a, summary_b)
        raise ZeroVariance("both group variances are zero with unequal means")
    t = (summary_a.mean - summary_b.mean) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (summary_a.n - 1) + vb ** 2 / (summary_b.n - 1))
    return TTestResult("welch", t, df, two_sided_p(t, df), summary_a, summary_b)


# --- Table-style summary ----------------------------------------------------

FEATURES = ("frequency", "depth")
STAT_ROWS = ("Mean", "SD", "df", "t", "P-val")


@dataclass
class FeatureComparison:
    feature: str
    fall: GroupSummary
    control: GroupSummary
    test: TTestResult


@dataclass
class SummaryReport:
    radius: float
    test_kind: str
    features: dict[str, FeatureComparison]


def _location_features(bmap: BeamMap, locations, radius: float):
    freqs, depths = [], []
    for loc in locations:
        stats = circle_stats(bmap, loc, radius)
        freqs.append(float(stats.frequency))
        depths.append(stats.mean_depth if stats.mean_depth is not None else 0.0)
    return freqs, depths


def summary_table(bmap: BeamMap, radius: float = 9.0, test_kind: str = "welch") -> SummaryReport:
    """Per-feature fall/control comparison around every mapped location.

    ``test_kind`` is "welch" for unpaired locations or "paired" when
    falls[i] and controls[i] form explicit pairs.
    """
    if test_kind not in ("welch", "paired"):
        raise ValueError(f"test_kind must be 'welch' or 'paired', got {test_kind!r}")
    if not bmap.falls or not bmap.controls:
        raise DataError("summary_table needs at least one fall and one control location")
    fall_f, fall_d = _location_features(bmap, bmap.falls, radius)
    ctrl_f, ctrl_d = _location_features(bmap, bmap.controls, radius)
    features = {}
    for name, fall_vals, ctrl_vals in (("frequency", fall_f, ctrl_f), ("depth", fall_d, ctrl_d)):
        if test_kind == "paired":
            test = paired_t(fall_vals, ctrl_vals)
        else:
            test = welch_t(GroupSummary.from_values(fall_vals), GroupSummary.from_values(ctrl_vals))
        features[name] = FeatureComparison(
            feature=name,
            fall=GroupSummary.from_values(fall_vals),
            control=GroupSummary.from_values(ctrl_vals),
            test=test,
        )
    return SummaryReport(radius=radius, test_kind=test_kind, features=features)
