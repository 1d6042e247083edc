"""Built-in oracle suites: gradient checks, attribution completeness, t-CDF."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attribution as attr
from .gradcheck import run_gradient_suite


@dataclass
class SuiteReport:
    name: str
    checked: int
    failures: list[str]

    @property
    def passed(self) -> bool:
        return not self.failures


class _LinearModel:
    """F(x) = w . x, exact reference for completeness at any step count."""

    def __init__(self, w: np.ndarray):
        self.w = w

    def logit_gradients(self, batch: np.ndarray, target: int):
        vals = np.tensordot(batch, self.w, axes=([1, 2, 3], [0, 1, 2]))
        grads = np.broadcast_to(self.w[None], batch.shape).copy()
        return vals, grads


class _SineModel:
    """F(x) = sum sin(x), a smooth nonlinearity for quadrature refinement."""

    def logit_gradients(self, batch: np.ndarray, target: int):
        vals = np.sin(batch).sum(axis=(1, 2, 3))
        return vals, np.cos(batch)


def gradient_suite(instances: int = 20) -> SuiteReport:
    res = run_gradient_suite(instances=instances)
    return SuiteReport("gradient-check", res.checked, res.failures)


def completeness_suite() -> SuiteReport:
    failures = []
    checked = 0
    rng = np.random.default_rng(77)

    # linear models are exact for every m >= 1
    for m in (1, 2, 7, 64):
        w = rng.standard_normal((1, 4, 4)).astype(np.float32)
        x = rng.random((1, 4, 4)).astype(np.float32)
        amap = attr.integrated_gradients(
            attr.AttributionRequest(model=_LinearModel(w), x=x, steps=m, target=0))
        checked += 1
        if amap.completeness_residual > 1e-4 * max(1.0, abs(amap.f_input - amap.f_baseline)):
            failures.append(f"linear m={m}: residual {amap.completeness_residual:.3e}")

    # midpoint refinement shrinks the residual on a smooth model
    x = rng.uniform(0.5, 2.5, (1, 6, 6)).astype(np.float32)
    res_by_m = {}
    for m in (8, 256):
        amap = attr.integrated_gradients(
            attr.AttributionRequest(model=_SineModel(), x=x, steps=m, target=0))
        res_by_m[m] = amap.completeness_residual
        checked += 1
    if res_by_m[256] > res_by_m[8] + 1e-9:
        failures.append(f"refinement: residual m=256 {res_by_m[256]:.3e} > m=8 {res_by_m[8]:.3e}")

    # null path
    x0 = rng.random((1, 4, 4)).astype(np.float32)
    amap = attr.integrated_gradients(attr.AttributionRequest(
        model=_LinearModel(np.ones((1, 4, 4), dtype=np.float32)), x=x0, baseline=x0, steps=16))
    checked += 1
    if amap.completeness_residual != 0.0 or np.any(amap.attributions != 0.0):
        failures.append("null path produced a nonzero map")
    return SuiteReport("ig-completeness", checked, failures)


def tcdf_suite() -> SuiteReport:
    from .beamstats import t_cdf, two_sided_p

    failures = []
    checked = 0

    def check(cond, label):
        nonlocal checked
        checked += 1
        if not cond:
            failures.append(label)

    check(abs(t_cdf(0.0, 5) - 0.5) < 1e-12, "t=0 symmetry")
    cauchy = 2.0 * (1.0 - (0.5 + math.atan(12.706) / math.pi))
    check(abs(two_sided_p(12.706, 1) - cauchy) < 1e-10, "df=1 closed form")
    normal = 2.0 * (1.0 - 0.5 * (1.0 + math.erf(1.95996 / math.sqrt(2.0))))
    check(abs(two_sided_p(1.95996, 1e6) - normal) < 1e-4, "normal limit")
    for df in (1.0, 3.5, 57.0, 400.0):
        ts = np.linspace(-8, 8, 161)
        vals = [t_cdf(float(t), df) for t in ts]
        check(all(b >= a - 1e-13 for a, b in zip(vals, vals[1:])), f"monotone df={df}")
        check(max(abs(t_cdf(float(t), df) + t_cdf(float(-t), df) - 1.0) for t in ts) < 1e-10,
              f"symmetry df={df}")
    return SuiteReport("t-cdf", checked, failures)


def run_all(gradient_instances: int = 20) -> list[SuiteReport]:
    return [gradient_suite(gradient_instances), completeness_suite(), tcdf_suite()]
