"""Central-finite-difference gradient checking for the fixed op set.

The oracle never touches the reverse pass: it re-runs the forward graph at
perturbed leaf values and compares (f(x+h) - f(x-h)) / 2h against the
analytic gradients, elementwise, at 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc

REL_TOL = 1e-4
FD_STEP = 1e-5


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Elementwise central finite differences of a scalar function f(x)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    xw = x.astype(np.float64).copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(xw)
        xf[i] = orig - h
        fm = f(xw)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_case(build, leaves: dict[str, np.ndarray], tol: float = REL_TOL) -> float:
    """Compare analytic and finite-difference gradients for one graph.

    ``build`` maps {name: ndarray} to a scalar loss value given a fresh
    float64 graph each call; it must register each array with
    ``graph.leaf(..., requires_grad=True)`` and report the handles back via
    the ``out`` dict it is handed.

    Returns the worst relative error over all checked leaves.
    """
    handles: dict[str, tc.Tensor] = {}
    graph = tc.GradGraph(dtype=np.float64)
    loss = build(graph, leaves, handles)
    grads = graph.backward(loss)
    worst = 0.0
    for name, arr in leaves.items():
        analytic = grads[handles[name].node]

        def f(x, _name=name):
            vals = dict(leaves)
            vals[_name] = x
            g2 = tc.GradGraph(dtype=np.float64)
            return float(build(g2, vals, {}).data[0])

        numeric = central_difference(f, arr)
        err = max_relative_error(analytic, numeric)
        worst = max(worst, err)
        if err >= tol:
            raise AssertionError(f"gradient check failed for leaf {name!r}: rel err {err:.3e}")
    return worst


# --- randomized instances per op kind ---------------------------------------


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return x


def _pool_safe(rng, shape, gap=1e-3):
    # keep window elements separated so the argmax is stable under +-h nudges
    while True:
        x = rng.standard_normal(shape)
        n, c, h, w = shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        s = np.sort(win, axis=1)
        if np.min(np.diff(s, axis=1)) > gap:
            return x


def _scalar_head(graph, t, handles_unused, labels):
    """Reduce an op output to a scalar through fixed downstream layers."""
    if t.data.ndim == 4:
        t = tc.global_avg_pool(graph, t)
    n, f = t.data.shape
    w = graph.leaf(np.linspace(-0.7, 0.9, f * 3).reshape(f, 3))
    b = graph.leaf(np.linspace(-0.2, 0.3, 3))
    t = tc.affine(graph, t, w, b)
    return tc.softmax_xent(graph, t, labels[:n])


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k)) * 0.5
    labels = [0, 2]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        wt = g.leaf(vals["w"], requires_grad=True)
        out["x"], out["w"] = xt, wt
        y = tc.conv2d(g, xt, wt, stride=stride, pad=pad)
        return _scalar_head(g, y, out, labels)

    return build, {"x": x, "w": w}


def _case_affine(rng):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4)) * 0.5
    b = rng.standard_normal(4) * 0.1
    labels = [1, 0, 3]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        wt = g.leaf(vals["w"], requires_grad=True)
        bt = g.leaf(vals["b"], requires_grad=True)
        out.update(x=xt, w=wt, b=bt)
        y = tc.affine(g, xt, wt, bt)
        return tc.softmax_xent(g, y, labels)

    return build, {"x": x, "w": w, "b": b}


def _case_batch_norm(rng):
    train = bool(rng.integers(0, 2))
    x = rng.standard_normal((3, 4, 5, 5))
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.2
    rm = rng.standard_normal(4) * 0.3
    rv = rng.uniform(0.5, 1.5, 4)
    labels = [0, 1, 2]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        gt = g.leaf(vals["gamma"], requires_grad=True)
        bt = g.leaf(vals["beta"], requires_grad=True)
        out.update(x=xt, gamma=gt, beta=bt)
        y = tc.batch_norm(g, xt, gt, bt, running_mean=rm.copy(), running_var=rv.copy(),
                          train=train, update_running=False)
        return _scalar_head(g, y, out, labels)

    return build, {"x": x, "gamma": gamma, "beta": beta}


def _case_relu(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    labels = [1, 0]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        out["x"] = xt
        return _scalar_head(g, tc.relu(g, xt), out, labels)

    return build, {"x": x}


def _case_max_pool2(rng):
    x = _pool_safe(rng, (2, 2, 4, 4))
    labels = [0, 1]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        out["x"] = xt
        return _scalar_head(g, tc.max_pool2(g, xt), out, labels)

    return build, {"x": x}


def _case_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    labels = [2, 0]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        out["x"] = xt
        return _scalar_head(g, tc.global_avg_pool(g, xt), out, labels)

    return build, {"x": x}


def _case_dropout(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    keep = float(rng.uniform(0.4, 0.9))
    mask_seed = int(rng.integers(0, 2**31))
    labels = [0, 2]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        out["x"] = xt
        y = tc.dropout(g, xt, keep=keep, train=True, rng=np.random.default_rng(mask_seed))
        return _scalar_head(g, y, out, labels)

    return build, {"x": x}


def _case_add(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    labels = [1, 2]

    def build(g, vals, out):
        at = g.leaf(vals["a"], requires_grad=True)
        bt = g.leaf(vals["b"], requires_grad=True)
        out.update(a=at, b=bt)
        return _scalar_head(g, tc.add(g, at, bt), out, labels)

    return build, {"a": a, "b": b}


def _case_softmax_xent(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    labels = [int(v) for v in rng.integers(0, 4, 3)]

    def build(g, vals, out):
        xt = g.leaf(vals["x"], requires_grad=True)
        out["x"] = xt
        return tc.softmax_xent(g, xt, labels)

    return build, {"x": x}


_CASES = {
    "conv2d": _case_conv2d,
    "affine": _case_affine,
    "batch_norm": _case_batch_norm,
    "relu": _case_relu,
    "max_pool2": _case_max_pool2,
    "global_avg_pool": _case_global_avg_pool,
    "dropout": _case_dropout,
    "add": _case_add,
    "softmax_xent": _case_softmax_xent,
}


@dataclass
class SuiteResult:
    checked: int = 0
    failures: list[str] = field(default_factory=list)
    worst_error: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def run_gradient_suite(instances: int = 20, seed: int = 20240, kinds=None, tol: float = REL_TOL) -> SuiteResult:
    """Randomized finite-difference checks for every op kind."""
    result = SuiteResult()
    for kind in kinds or tc.OP_KINDS:
        case = _CASES[kind]
        for i in range(instances):
            rng = np.random.default_rng([seed, tc.OP_KINDS.index(kind), i])
            build, leaves = case(rng)
            try:
                err = check_case(build, leaves, tol=tol)
                result.worst_error = max(result.worst_error, err)
            except AssertionError as exc:
                result.failures.append(f"{kind}[{i}]: {exc}")
            result.checked += 1
    return result
