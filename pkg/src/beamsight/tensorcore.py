"""Dense tensors plus reverse-mode differentiation over a fixed op set.

The op set is exactly what the residual classifier and the attribution
path need: conv2d, affine, batch_norm, relu, max_pool2, global_avg_pool,
dropout, add, softmax_xent.  A ``GradGraph`` is an append-only tape whose
creation order is its topological order; ``backward`` walks it in reverse
and accumulates gradients by summation at fan-out.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NumericError

OP_KINDS = (
    "conv2d",
    "affine",
    "batch_norm",
    "relu",
    "max_pool2",
    "global_avg_pool",
    "dropout",
    "add",
    "softmax_xent",
)


class ShapeMismatch(DataError):
    pass


class NonFinite(NumericError):
    pass


class NotScalar(DataError):
    pass


class Tensor:
    """A dense array plus the id of the graph node that produced it."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: int | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.node})"


class _Node:
    __slots__ = ("kind", "inputs", "params", "out", "ctx", "needs_grad")

    def __init__(self, kind, inputs, params, out, ctx, needs_grad):
        self.kind = kind          # None for leaves
        self.inputs = inputs      # node ids, all smaller than this node's id
        self.params = params
        self.out = out            # saved activation (ndarray)
        self.ctx = ctx            # saved context for backward / replay
        self.needs_grad = needs_grad


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values produced by {where}")


class GradGraph:
    """Append-only op tape; single-writer, replayable, reverse-differentiable."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        """Register a leaf (input or parameter) and return its tensor handle."""
        arr = np.ascontiguousarray(data, dtype=self.dtype)
        _check_finite(arr, "leaf")
        self.nodes.append(_Node(None, (), {}, arr, None, requires_grad))
        return Tensor(arr, len(self.nodes) - 1)

    def forward(self, kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
        """Apply one op of the fixed set and append the result to the tape."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        for t in inputs:
            if t.node is None or t.node >= len(self.nodes):
                raise ValueError("input tensor does not belong to this graph")
        datas = [t.data for t in inputs]
        # overflow surfaces as NonFinite below; silence the redundant warning
        with np.errstate(over="ignore", invalid="ignore"):
            out, ctx = _FORWARD[kind](datas, params)
        _check_finite(out, kind)
        needs = any(self.nodes[t.node].needs_grad for t in inputs)
        self.nodes.append(_Node(kind, tuple(t.node for t in inputs), params, out, ctx, needs))
        return Tensor(out, len(self.nodes) - 1)

    def backward(self, output: Tensor | int) -> dict[int, np.ndarray]:
        """Gradients of a size-1 output with respect to every differentiable leaf.

        Leaves registered with ``requires_grad`` that do not contribute to the
        output receive a zero gradient.  Fan-out accumulates by summation.
        """
        out_id = output.node if isinstance(output, Tensor) else output
        node = self.nodes[out_id]
        if node.out.size != 1:
            raise NotScalar(f"backward needs a size-1 output, got shape {node.out.shape}")
        seed = np.ones_like(node.out)
        grads = self._backward_from(out_id, seed)
        result = {}
        for nid, nd in enumerate(self.nodes):
            if nd.kind is None and nd.needs_grad:
                result[nid] = grads.get(nid, np.zeros_like(nd.out))
        return result

    def _backward_from(self, out_id: int, seed: np.ndarray) -> dict[int, np.ndarray]:
        """Reverse pass from an arbitrary node with an explicit upstream gradient."""
        grads: dict[int, np.ndarray] = {out_id: seed}
        for nid in range(out_id, -1, -1):
            node = self.nodes[nid]
            if node.kind is None or nid not in grads or not node.needs_grad:
                continue
            g_out = grads.pop(nid)
            in_datas = [self.nodes[i].out for i in node.inputs]
            gs = _BACKWARD[node.kind](g_out, in_datas, node.out, node.ctx, node.params)
            for iid, g in zip(node.inputs, gs):
                if g is None or not self.nodes[iid].needs_grad:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + g
                else:
                    grads[iid] = g
        return grads

    def replay(self) -> bool:
        """Recompute every op from the stored leaves; True iff bit-identical.

        Stochastic context (dropout masks) and any running-statistics updates
        are taken from the recorded tape, so a replay is pure.
        """
        for node in self.nodes:
            if node.kind is None:
                continue
            datas = [self.nodes[i].out for i in node.inputs]
            out, _ = _FORWARD[node.kind](datas, node.params, replay_ctx=node.ctx)
            if not np.array_equal(out, node.out):
                return False
        return True


# ---------------------------------------------------------------------------
# forward/backward kernels
#
# each forward takes (input arrays, params[, replay_ctx]) and returns
# (output, ctx); each backward takes (grad_out, input arrays, output, ctx,
# params) and returns one gradient (or None) per input.
# ---------------------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (n, c, oh, ow, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _fwd_conv2d(datas, params, replay_ctx=None):
    _require(len(datas) == 2, "conv2d takes (input, weight)")
    x, w = datas
    _require(x.ndim == 4, f"conv2d input must be NCHW, got {x.shape}")
    _require(w.ndim == 4, f"conv2d weight must be OIHW, got {w.shape}")
    stride = int(params.get("stride", 1))
    pad = int(params.get("pad", 0))
    _require(stride >= 1 and pad >= 0, "conv2d needs stride >= 1 and pad >= 0")
    n, c, h, w_in = x.shape
    o, i, kh, kw = w.shape
    _require(i == c, f"conv2d channel mismatch: input {c}, weight expects {i}")
    _require(h + 2 * pad >= kh and w_in + 2 * pad >= kw, "conv2d kernel larger than padded input")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    # per-sample batched matmul: identical samples see an identical GEMM, so
    # their output rows are bit-identical regardless of batch position
    out = cols @ w.reshape(o, i * kh * kw).T
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), {"cols": cols, "oh": oh, "ow": ow}


def _bwd_conv2d(g, datas, out, ctx, params):
    x, w = datas
    stride = int(params.get("stride", 1))
    pad = int(params.get("pad", 0))
    n, c, h, w_in = x.shape
    o, i, kh, kw = w.shape
    oh, ow = ctx["oh"], ctx["ow"]
    g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o))
    dw = (g_mat.T @ ctx["cols"].reshape(n * oh * ow, -1)).reshape(w.shape)
    gcols = g_mat @ w.reshape(o, i * kh * kw)
    gcols = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * pad, w_in + 2 * pad), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += gcols[..., ki, kj]
    dx = dxp[:, :, pad : pad + h, pad : pad + w_in] if pad else dxp
    return dx, dw


def _fwd_affine(datas, params, replay_ctx=None):
    _require(len(datas) == 3, "affine takes (input, weight, bias)")
    x, w, b = datas
    _require(x.ndim == 2 and w.ndim == 2 and b.ndim == 1, "affine expects x (N,F), w (F,K), b (K,)")
    _require(x.shape[1] == w.shape[0], f"affine feature mismatch: {x.shape} @ {w.shape}")
    _require(b.shape[0] == w.shape[1], f"affine bias mismatch: {b.shape} vs {w.shape}")
    # batched per-row GEMM keeps identical rows bit-identical (see conv2d)
    out = (x[:, None, :] @ w)[:, 0, :] + b
    return out, None


def _bwd_affine(g, datas, out, ctx, params):
    x, w, _ = datas
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _fwd_batch_norm(datas, params, replay_ctx=None):
    _require(len(datas) == 3, "batch_norm takes (input, gamma, beta)")
    x, gamma, beta = datas
    _require(x.ndim == 4, f"batch_norm input must be NCHW, got {x.shape}")
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,), "batch_norm gamma/beta must be (C,)")
    eps = float(params.get("eps", 1e-5))
    train = bool(params.get("train", False))
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if params.get("update_running", True) and replay_ctx is None:
            momentum = float(params.get("momentum", 0.1))
            rm, rv = params["running_mean"], params["running_var"]
            rm *= 1.0 - momentum
            rm += momentum * mean.astype(rm.dtype)
            rv *= 1.0 - momentum
            rv += momentum * var.astype(rv.dtype)
    else:
        mean = params["running_mean"].astype(x.dtype)
        var = params["running_var"].astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, {"xhat": xhat, "inv_std": inv_std, "train": train}


def _bwd_batch_norm(g, datas, out, ctx, params):
    x, gamma, _ = datas
    xhat, inv_std = ctx["xhat"], ctx["inv_std"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    gscaled = g * gamma[None, :, None, None]
    if ctx["train"]:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        sum_g = gscaled.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gscaled * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv_std[None, :, None, None] / m) * (m * gscaled - sum_g - xhat * sum_gx)
    else:
        dx = gscaled * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def _fwd_relu(datas, params, replay_ctx=None):
    _require(len(datas) == 1, "relu takes one input")
    (x,) = datas
    return np.maximum(x, 0), None


def _bwd_relu(g, datas, out, ctx, params):
    (x,) = datas
    return (g * (x > 0),)


def _fwd_max_pool2(datas, params, replay_ctx=None):
    _require(len(datas) == 1, "max_pool2 takes one input")
    (x,) = datas
    _require(x.ndim == 4, f"max_pool2 input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins ties, deterministic
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), {"idx": idx}


def _bwd_max_pool2(g, datas, out, ctx, params):
    (x,) = datas
    n, c, h, w = x.shape
    gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(gwin, ctx["idx"][..., None], g[..., None], axis=-1)
    dx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (np.ascontiguousarray(dx),)


def _fwd_global_avg_pool(datas, params, replay_ctx=None):
    _require(len(datas) == 1, "global_avg_pool takes one input")
    (x,) = datas
    _require(x.ndim == 4, f"global_avg_pool input must be NCHW, got {x.shape}")
    return x.mean(axis=(2, 3)), None


def _bwd_global_avg_pool(g, datas, out, ctx, params):
    (x,) = datas
    scale = np.asarray(1.0 / (x.shape[2] * x.shape[3]), dtype=x.dtype)
    return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),)


def _fwd_dropout(datas, params, replay_ctx=None):
    _require(len(datas) == 1, "dropout takes one input")
    (x,) = datas
    keep = float(params.get("keep", 0.5))
    _require(0.0 < keep <= 1.0, f"dropout keep probability must be in (0, 1], got {keep}")
    if not params.get("train", False):
        return x.copy(), {"mask": None}
    if replay_ctx is not None:
        mask = replay_ctx["mask"]
    else:
        rng = params.get("rng")
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = rng.random(x.shape) < keep
    scale = np.asarray(1.0 / keep, dtype=x.dtype)
    return x * mask * scale, {"mask": mask}


def _bwd_dropout(g, datas, out, ctx, params):
    if ctx["mask"] is None:
        return (g.copy(),)
    keep = float(params.get("keep", 0.5))
    return (g * ctx["mask"] * np.asarray(1.0 / keep, dtype=g.dtype),)


def _fwd_add(datas, params, replay_ctx=None):
    _require(len(datas) == 2, "add takes two inputs")
    a, b = datas
    _require(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b, None


def _bwd_add(g, datas, out, ctx, params):
    return g, g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; rows are positive and sum to 1."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_softmax_xent(datas, params, replay_ctx=None):
    _require(len(datas) == 1, "softmax_xent takes (logits,) with labels as a param")
    (logits,) = datas
    _require(logits.ndim == 2, f"softmax_xent expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(params["labels"], dtype=np.int64)
    _require(labels.shape == (logits.shape[0],), "softmax_xent labels must be (N,)")
    _require(labels.min() >= 0 and labels.max() < logits.shape[1], "label index out of range")
    probs = softmax(logits)
    n = logits.shape[0]
    picked = np.clip(probs[np.arange(n), labels], np.finfo(logits.dtype).tiny, None)
    loss = np.array([-np.log(picked).mean()], dtype=logits.dtype)
    return loss, {"probs": probs}


def _bwd_softmax_xent(g, datas, out, ctx, params):
    (logits,) = datas
    labels = np.asarray(params["labels"], dtype=np.int64)
    n = logits.shape[0]
    d = ctx["probs"].copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g.reshape(()) / n),)


_FORWARD = {
    "conv2d": _fwd_conv2d,
    "affine": _fwd_affine,
    "batch_norm": _fwd_batch_norm,
    "relu": _fwd_relu,
    "max_pool2": _fwd_max_pool2,
    "global_avg_pool": _fwd_global_avg_pool,
    "dropout": _fwd_dropout,
    "add": _fwd_add,
    "softmax_xent": _fwd_softmax_xent,
}

_BACKWARD = {
    "conv2d": _bwd_conv2d,
    "affine": _bwd_affine,
    "batch_norm": _bwd_batch_norm,
    "relu": _bwd_relu,
    "max_pool2": _bwd_max_pool2,
    "global_avg_pool": _bwd_global_avg_pool,
    "dropout": _bwd_dropout,
    "add": _bwd_add,
    "softmax_xent": _bwd_softmax_xent,
}


# thin wrappers so model code reads like layer calls


def conv2d(g: GradGraph, x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return g.forward("conv2d", (x, w), stride=stride, pad=pad)


def affine(g: GradGraph, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return g.forward("affine", (x, w, b))


def batch_norm(g: GradGraph, x: Tensor, gamma: Tensor, beta: Tensor, *, running_mean, running_var,
               train: bool, update_running: bool = True, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    return g.forward("batch_norm", (x, gamma, beta), running_mean=running_mean,
                     running_var=running_var, train=train, update_running=update_running,
                     eps=eps, momentum=momentum)


def relu(g: GradGraph, x: Tensor) -> Tensor:
    return g.forward("relu", (x,))


def max_pool2(g: GradGraph, x: Tensor) -> Tensor:
    return g.forward("max_pool2", (x,))


def global_avg_pool(g: GradGraph, x: Tensor) -> Tensor:
    return g.forward("global_avg_pool", (x,))


def dropout(g: GradGraph, x: Tensor, keep: float, train: bool, rng=None) -> Tensor:
    return g.forward("dropout", (x,), keep=keep, train=train, rng=rng)


def add(g: GradGraph, a: Tensor, b: Tensor) -> Tensor:
    return g.forward("add", (a, b))


def softmax_xent(g: GradGraph, logits: Tensor, labels: Iterable[int]) -> Tensor:
    return g.forward("softmax_xent", (logits,), labels=np.asarray(list(labels), dtype=np.int64))
