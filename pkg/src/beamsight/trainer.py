"""Mini-batch SGD, epoch accounting, metrics, and the transfer-vs-scratch harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from . import resnet as rn
from . import tensorcore as tc
from .errors import DataError, NumericError


class EmptyDataset(DataError):
    pass


class DivergedLoss(NumericError):
    """Raised when the loss goes non-finite; carries the last finite checkpoint."""

    def __init__(self, message, history=None, last_checkpoint=None):
        super().__init__(message)
        self.history = history or []
        self.last_checkpoint = last_checkpoint


@dataclass
class HParams:
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        # learning_rate 0 is allowed as the null-step limit
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate < 0:
            raise ValueError(
                f"need batch_size >= 1, epochs >= 1, learning_rate >= 0; got {self}")


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    val_accuracy: float
    train_loss: float


class ConfusionMatrix:
    """Actual-versus-predicted counts over an ordered class tuple."""

    def __init__(self, classes, counts=None):
        self.classes = tuple(classes)
        k = len(self.classes)
        self.counts = np.zeros((k, k), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (k, k):
            raise ValueError(f"counts must be {k}x{k}, got {self.counts.shape}")

    def add(self, actual: int, predicted: int, n: int = 1) -> None:
        self.counts[actual, predicted] += n

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def recall(self, label: str) -> float:
        i = self.classes.index(label)
        row = self.counts[i].sum()
        return float(self.counts[i, i]) / row if row else 0.0

    def row_sums(self) -> dict[str, int]:
        return {c: int(self.counts[i].sum()) for i, c in enumerate(self.classes)}

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionMatrix) and self.classes == other.classes
                and np.array_equal(self.counts, other.counts))

    def __repr__(self) -> str:
        return f"ConfusionMatrix(classes={self.classes}, counts={self.counts.tolist()})"


def class_index(samples) -> tuple[str, ...]:
    return tuple(sorted({s.label for s in samples}))


def _batch_arrays(samples, classes, side: int) -> tuple[np.ndarray, np.ndarray]:
    index = {c: i for i, c in enumerate(classes)}
    xs = np.stack([np.transpose(s.pixels, (2, 0, 1)) for s in samples]).astype(np.float32)
    ys = np.array([index[s.label] for s in samples], dtype=np.int64)
    return xs, ys


def _prepare(sample, side, aug_rng=None):
    s = sample
    if aug_rng is not None:
        s = ds.augment(s, aug_rng)
    if s.height != side or s.width != side:
        s = ds.resize(s, side)
    return s


def evaluate(model: rn.Model, dataset, batch_size: int = 16,
             classes=None) -> tuple[ConfusionMatrix, float]:
    """Eval-mode argmax predictions; accuracy is trace over total."""
    if not dataset:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    classes = tuple(classes) if classes is not None else class_index(dataset)
    side = model.config.input_size
    cm = ConfusionMatrix(classes)
    was = model.mode
    model.eval()
    try:
        prepared = [_prepare(s, side) for s in dataset]
        for start in range(0, len(prepared), batch_size):
            chunk = prepared[start : start + batch_size]
            xs, ys = _batch_arrays(chunk, classes, side)
            logits = rn.classify(model, xs)
            preds = logits.argmax(axis=1)
            for a, p in zip(ys, preds):
                cm.add(int(a), int(p))
    finally:
        model.mode = was
    return cm, cm.accuracy()


def train(model: rn.Model, train_set, val_set, hparams: HParams, *,
          augment: bool = True, classes=None) -> tuple[list[EpochRecord], bytes]:
    """SGD with momentum on the unfrozen parameters.

    Batches are reshuffled per epoch (last short batch kept), train-side
    augmentation is redrawn per epoch from streams keyed by
    (seed, epoch, sample position), and the returned checkpoint is the one
    from the epoch with the best validation accuracy (earliest on ties).
    """
    hparams.validate()
    if not train_set or not val_set:
        raise EmptyDataset("train and validation sets must be non-empty")
    train_ids = {(s.source_id, s.tile_index) for s in train_set}
    val_ids = {(s.source_id, s.tile_index) for s in val_set}
    overlap = train_ids & val_ids
    if overlap:
        raise DataError(f"train and validation sets share {len(overlap)} sample(s)")
    classes = tuple(classes) if classes is not None else class_index(list(train_set) + list(val_set))
    side = model.config.input_size
    velocity = {name: np.zeros_like(p) for name, p in model.params.items()}
    history: list[EpochRecord] = []
    best_acc, best_blob = -1.0, rn.checkpoint_bytes(model)
    last_good = best_blob
    n = len(train_set)
    for epoch in range(hparams.epochs):
        model.train()
        order = np.random.default_rng([hparams.seed, epoch, 1]).permutation(n)
        correct = 0
        loss_sum = 0.0
        seen = 0
        for b_idx, start in enumerate(range(0, n, hparams.batch_size)):
            batch_positions = order[start : start + hparams.batch_size]
            prepared = []
            for pos in batch_positions:
                aug_rng = np.random.default_rng([hparams.seed, epoch, 2, int(pos)]) if augment else None
                prepared.append(_prepare(train_set[int(pos)], side, aug_rng))
            xs, ys = _batch_arrays(prepared, classes, side)
            drop_rng = np.random.default_rng([hparams.seed, epoch, 3, b_idx])
            param_handles: dict[str, tc.Tensor] = {}
            try:
                graph = tc.GradGraph(dtype=np.float32)
                logits = rn.forward_graph(model, graph, xs, dropout_rng=drop_rng,
                                          param_handles=param_handles)
                loss = tc.softmax_xent(graph, logits, ys)
                grads = graph.backward(loss)
            except tc.NonFinite as exc:
                raise DivergedLoss(f"epoch {epoch}: {exc}", history, last_good) from exc
            for name, tensor in param_handles.items():
                if model.frozen[name]:
                    continue
                g = grads.get(tensor.node)
                if g is None:
                    continue
                v = velocity[name]
                v *= hparams.momentum
                v += g
                model.params[name] -= hparams.learning_rate * v
            correct += int((logits.data.argmax(axis=1) == ys).sum())
            loss_sum += float(loss.data[0]) * len(ys)
            seen += len(ys)
        model.eval()
        _, val_acc = evaluate(model, val_set, hparams.batch_size, classes)
        record = EpochRecord(epoch=epoch, train_accuracy=correct / seen,
                             val_accuracy=val_acc, train_loss=loss_sum / seen)
        history.append(record)
        last_good = rn.checkpoint_bytes(model)
        if val_acc > best_acc:
            best_acc, best_blob = val_acc, last_good
    return history, best_blob


@dataclass
class ArmResult:
    history: list[EpochRecord]
    best_checkpoint: bytes
    best_val_accuracy: float
    trained_param_count: int


@dataclass
class TransferReport:
    source_history: list[EpochRecord]
    source_checkpoint: bytes
    arms: dict[str, ArmResult] = field(default_factory=dict)


def transfer_experiment(source_set, target_train, target_val, hparams: HParams, *,
                        config: rn.ModelConfig, source_epochs: int | None = None,
                        source_val_fraction: float = 0.2) -> TransferReport:
    """Pretrain on the source task, retrain the reset head on the target, and
    run a same-budget scratch baseline.

    The transfer arm freezes everything but the head, so its backbone must
    stay byte-identical to the source checkpoint.
    """
    if not source_set:
        raise EmptyDataset("source task set must be non-empty")
    source_classes = class_index(source_set)
    target_classes = class_index(list(target_train) + list(target_val))

    src_cfg = rn.ModelConfig(**{**config.to_dict(), "num_classes": len(source_classes)})
    src_train, src_val = ds.split(source_set, ds.SplitSpec(
        val_fraction=source_val_fraction, seed=hparams.seed, group_by_source=False))
    src_hp = HParams(batch_size=hparams.batch_size,
                     epochs=source_epochs or hparams.epochs,
                     learning_rate=hparams.learning_rate, momentum=hparams.momentum,
                     seed=hparams.seed)
    source_model = rn.apply_freeze_policy(rn.build_model(src_cfg, seed=hparams.seed), "none")
    source_history, source_blob = train(source_model, src_train, src_val, src_hp,
                                        classes=source_classes)

    transfer_model = rn.model_from_bytes(source_blob)
    rn.reset_head(transfer_model, num_classes=len(target_classes), seed=hparams.seed + 1)
    rn.apply_freeze_policy(transfer_model, "head_only")
    transfer_model.train()
    transfer_history, transfer_blob = train(transfer_model, target_train, target_val,
                                            hparams, classes=target_classes)

    scratch_cfg = rn.ModelConfig(**{**config.to_dict(), "num_classes": len(target_classes)})
    scratch_model = rn.apply_freeze_policy(rn.build_model(scratch_cfg, seed=hparams.seed + 2), "none")
    scratch_history, scratch_blob = train(scratch_model, target_train, target_val,
                                          hparams, classes=target_classes)

    return TransferReport(
        source_history=source_history,
        source_checkpoint=source_blob,
        arms={
            "transfer": ArmResult(
                history=transfer_history, best_checkpoint=transfer_blob,
                best_val_accuracy=max(r.val_accuracy for r in transfer_history),
                trained_param_count=transfer_model.trainable_param_count()),
            "scratch": ArmResult(
                history=scratch_history, best_checkpoint=scratch_blob,
                best_val_accuracy=max(r.val_accuracy for r in scratch_history),
                trained_param_count=scratch_model.trainable_param_count()),
        },
    )
