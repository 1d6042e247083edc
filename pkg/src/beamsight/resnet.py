"""A small residual classifier: configurable stages, freeze policies, checkpoints.

The architecture is a stem conv + 2x2 max pool followed by stages of basic
residual blocks; every stage doubles the channel count and halves the
spatial resolution, and a global average pool feeds a dropout + affine
head.  Checkpoints are bit-exact: magic "RFHD", version, a JSON header
(config + parameter manifest), then raw little-endian float32 values.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .errors import DataError, InvalidConfig

CHECKPOINT_MAGIC = b"RFHD"
CHECKPOINT_VERSION = 1


class CorruptCheckpoint(DataError):
    pass


@dataclass
class ModelConfig:
    input_channels: int = 1
    input_size: int = 224
    stem_channels: int = 16
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    num_classes: int = 2
    dropout_p: float = 0.5  # drop probability before the head

    @property
    def head_features(self) -> int:
        return self.stem_channels * 2 ** len(self.blocks_per_stage)

    @property
    def min_divisor(self) -> int:
        # stem pool halves once, then one halving per stage
        return 2 ** (len(self.blocks_per_stage) + 1)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.input_channels < 1 or self.stem_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        if not self.blocks_per_stage or any(b < 1 for b in self.blocks_per_stage):
            raise InvalidConfig(f"blocks_per_stage must be positive, got {self.blocks_per_stage}")
        if self.input_size < self.min_divisor or self.input_size % self.min_divisor:
            raise InvalidConfig(
                f"input_size {self.input_size} must be a positive multiple of {self.min_divisor}")

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "blocks_per_stage": list(self.blocks_per_stage),
            "num_classes": self.num_classes,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            input_channels=int(d["input_channels"]),
            input_size=int(d["input_size"]),
            stem_channels=int(d["stem_channels"]),
            blocks_per_stage=tuple(int(b) for b in d["blocks_per_stage"]),
            num_classes=int(d["num_classes"]),
            dropout_p=float(d["dropout_p"]),
        )
        cfg.validate()
        return cfg


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]          # trainable tensors, float32
    buffers: dict[str, np.ndarray]         # batch-norm running statistics
    frozen: dict[str, bool] = field(default_factory=dict)
    mode: str = "train"                    # "train" | "eval"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def head_param_names(self) -> tuple[str, str]:
        return ("head.w", "head.b")

    def trainable_param_count(self) -> int:
        return sum(p.size for name, p in self.params.items() if not self.frozen[name])

    def total_param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def classify(self, batch: np.ndarray) -> np.ndarray:
        return classify(self, batch)

    def logit_gradients(self, batch: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
        return logit_gradients(self, batch, target)


def _he_conv(rng, out_ch, in_ch, k):
    fan_in = in_ch * k * k
    return (rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _he_affine(rng, fan_in, fan_out):
    return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _stage_widths(config: ModelConfig) -> list[int]:
    return [config.stem_channels * 2 ** (k + 1) for k in range(len(config.blocks_per_stage))]


def init_head(rng, config: ModelConfig) -> dict[str, np.ndarray]:
    return {
        "head.w": _he_affine(rng, config.head_features, config.num_classes),
        "head.b": np.zeros(config.num_classes, dtype=np.float32),
    }


def build_model(config: ModelConfig, seed: int) -> Model:
    """He-initialized model, deterministic for a fixed (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def add_bn(prefix, ch):
        params[f"{prefix}.gamma"] = np.ones(ch, dtype=np.float32)
        params[f"{prefix}.beta"] = np.zeros(ch, dtype=np.float32)
        buffers[f"{prefix}.running_mean"] = np.zeros(ch, dtype=np.float32)
        buffers[f"{prefix}.running_var"] = np.ones(ch, dtype=np.float32)

    params["stem.conv.w"] = _he_conv(rng, config.stem_channels, config.input_channels, 3)
    add_bn("stem.bn", config.stem_channels)
    in_ch = config.stem_channels
    for s, (width, blocks) in enumerate(zip(_stage_widths(config), config.blocks_per_stage)):
        for b in range(blocks):
            prefix = f"stage{s}.block{b}"
            first = b == 0
            params[f"{prefix}.conv1.w"] = _he_conv(rng, width, in_ch if first else width, 3)
            add_bn(f"{prefix}.bn1", width)
            params[f"{prefix}.conv2.w"] = _he_conv(rng, width, width, 3)
            add_bn(f"{prefix}.bn2", width)
            if first:
                params[f"{prefix}.proj.w"] = _he_conv(rng, width, in_ch, 1)
                add_bn(f"{prefix}.projbn", width)
        in_ch = width
    params.update(init_head(rng, config))
    frozen = {name: False for name in params}
    return Model(config=config, params=params, buffers=buffers, frozen=frozen, mode="train")


def apply_freeze_policy(model: Model, policy: str) -> Model:
    """"head_only" freezes everything but the affine head; "none" unfreezes all."""
    if policy not in ("head_only", "none"):
        raise ValueError(f"unknown freeze policy {policy!r}")
    head = set(model.head_param_names())
    for name in model.params:
        model.frozen[name] = policy == "head_only" and name not in head
    return model


def reset_head(model: Model, num_classes: int, seed: int) -> Model:
    """Fresh classification head for a new task; the head starts unfrozen."""
    config = replace(model.config, num_classes=num_classes)
    config.validate()
    rng = np.random.default_rng(seed)
    model.config = config
    model.params.update(init_head(rng, config))
    for name in model.head_param_names():
        model.frozen[name] = False
    return model


def forward_graph(model: Model, graph: tc.GradGraph, batch, dropout_rng=None,
                  param_handles: dict[str, tc.Tensor] | None = None) -> tc.Tensor:
    """Run the classifier inside an existing graph; returns the logits tensor.

    ``batch`` is either an (N, C, S, S) array or a leaf tensor already
    registered on the graph (used when input gradients are wanted).  When
    ``param_handles`` is given it is filled with the per-parameter leaf
    tensors so an optimizer can look up their gradients.
    """
    cfg = model.config
    x = batch if isinstance(batch, tc.Tensor) else graph.leaf(np.asarray(batch))
    if x.data.ndim != 4 or x.data.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise tc.ShapeMismatch(
            f"batch must be (N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}), "
            f"got {x.data.shape}")
    train = model.mode == "train"
    handles: dict[str, tc.Tensor] = param_handles if param_handles is not None else {}

    def p(name):
        if name not in handles:
            requires = train and not model.frozen[name]
            handles[name] = graph.leaf(model.params[name], requires_grad=requires)
        return handles[name]

    def bn(t, prefix):
        # a frozen batch-norm normalizes with its stored running statistics
        # and never updates them, so a frozen backbone stays bit-stable
        bn_frozen = model.frozen[f"{prefix}.gamma"]
        return tc.batch_norm(
            graph, t, p(f"{prefix}.gamma"), p(f"{prefix}.beta"),
            running_mean=model.buffers[f"{prefix}.running_mean"],
            running_var=model.buffers[f"{prefix}.running_var"],
            train=train and not bn_frozen,
            update_running=train and not bn_frozen,
        )

    x = tc.conv2d(graph, x, p("stem.conv.w"), stride=1, pad=1)
    x = tc.relu(graph, bn(x, "stem.bn"))
    x = tc.max_pool2(graph, x)
    for s, blocks in enumerate(model.config.blocks_per_stage):
        for b in range(blocks):
            prefix = f"stage{s}.block{b}"
            first = b == 0
            y = tc.conv2d(graph, x, p(f"{prefix}.conv1.w"), stride=2 if first else 1, pad=1)
            y = tc.relu(graph, bn(y, f"{prefix}.bn1"))
            y = tc.conv2d(graph, y, p(f"{prefix}.conv2.w"), stride=1, pad=1)
            y = bn(y, f"{prefix}.bn2")
            if first:
                skip = tc.conv2d(graph, x, p(f"{prefix}.proj.w"), stride=2, pad=0)
                skip = bn(skip, f"{prefix}.projbn")
            else:
                skip = x
            x = tc.relu(graph, tc.add(graph, y, skip))
    x = tc.global_avg_pool(graph, x)
    keep = 1.0 - model.config.dropout_p
    x = tc.dropout(graph, x, keep=keep, train=train and keep < 1.0, rng=dropout_rng)
    logits = tc.affine(graph, x, p("head.w"), p("head.b"))
    return logits


def classify(model: Model, batch: np.ndarray) -> np.ndarray:
    """Eval-mode logits for a batch; deterministic for identical inputs."""
    was = model.mode
    model.mode = "eval"
    try:
        graph = tc.GradGraph(dtype=np.float32)
        logits = forward_graph(model, graph, np.asarray(batch, dtype=np.float32))
    finally:
        model.mode = was
    return logits.data


def logit_gradients(model: Model, batch: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample target logits and their gradients with respect to the input.

    Rows of an eval-mode batch are independent, so one reverse pass seeded
    with a one-hot column recovers every row's own input gradient.
    """
    cfg = model.config
    if not 0 <= target < cfg.num_classes:
        raise ValueError(f"target class {target} out of range for {cfg.num_classes} classes")
    was = model.mode
    model.mode = "eval"
    try:
        graph = tc.GradGraph(dtype=np.float32)
        arr = np.asarray(batch, dtype=np.float32)
        x = graph.leaf(arr, requires_grad=True)
        logits = forward_graph(model, graph, x)
        seed = np.zeros_like(logits.data)
        seed[:, target] = 1.0
        grads = graph._backward_from(logits.node, seed)
        grad_x = grads.get(x.node)
        if grad_x is None:
            grad_x = np.zeros_like(arr)
    finally:
        model.mode = was
    return logits.data[:, target].copy(), grad_x


# --- checkpoint format --------------------------------------------------------


def _manifest_entries(model: Model):
    offset = 0
    entries = []
    for kind, table in (("param", model.params), ("buffer", model.buffers)):
        for name in table:
            arr = table[name]
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
            offset += arr.size * 4
    return entries, offset


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize config + parameters to the RFHD byte format."""
    entries, payload_len = _manifest_entries(model)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
         "manifest": entries},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    out.write(header)
    for table in (model.params, model.buffers):
        for name in table:
            out.write(np.ascontiguousarray(table[name], dtype="<f4").tobytes())
    blob = out.getvalue()
    assert len(blob) == 12 + len(header) + payload_len
    return blob


def model_from_bytes(blob: bytes) -> Model:
    """Parse an RFHD checkpoint; any structural defect raises CorruptCheckpoint."""
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError, InvalidConfig) as exc:
        raise CorruptCheckpoint(f"malformed header: {exc}") from None
    payload = blob[12 + header_len :]
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    end = 0
    for entry in manifest:
        try:
            name, shape = entry["name"], tuple(int(v) for v in entry["shape"])
            offset, kind = int(entry["offset"]), entry["kind"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"malformed manifest entry: {exc}") from None
        size = int(np.prod(shape)) if shape else 1
        if offset < 0 or offset + size * 4 > len(payload):
            raise CorruptCheckpoint(f"manifest entry {name!r} overruns the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if kind == "param":
            params[name] = arr
        elif kind == "buffer":
            buffers[name] = arr
        else:
            raise CorruptCheckpoint(f"unknown manifest kind {kind!r}")
        end = max(end, offset + size * 4)
    if end != len(payload):
        raise CorruptCheckpoint(f"payload length {len(payload)} does not match manifest end {end}")
    model = Model(config=config, params=params, buffers=buffers,
                  frozen={name: False for name in params}, mode="eval")
    _validate_shapes(model)
    return model


def _validate_shapes(model: Model) -> None:
    reference = build_model(model.config, seed=0)
    ref_shapes = {n: p.shape for n, p in reference.params.items()}
    ref_buf = {n: b.shape for n, b in reference.buffers.items()}
    got_shapes = {n: p.shape for n, p in model.params.items()}
    got_buf = {n: b.shape for n, b in model.buffers.items()}
    if ref_shapes != got_shapes or ref_buf != got_buf:
        raise CorruptCheckpoint("manifest does not match the architecture implied by config")


def save_checkpoint(model: Model, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    from pathlib import Path

    p = Path(path)
    if not p.is_file():
        raise CorruptCheckpoint(f"checkpoint {path} does not exist")
    return model_from_bytes(p.read_bytes())


def parameter_bytes(model: Model, names=None) -> dict[str, bytes]:
    """Raw little-endian bytes per tensor, for byte-identity comparisons."""
    out = {}
    for name, arr in list(model.params.items()) + list(model.buffers.items()):
        if names is None or name in names:
            out[name] = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return out


def backbone_names(model: Model) -> list[str]:
    head = set(model.head_param_names())
    names = [n for n in model.params if n not in head]
    names.extend(model.buffers)
    return names
