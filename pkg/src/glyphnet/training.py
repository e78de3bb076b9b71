"""Loss, AdamW, plateau LR scheduling, the cross-validation loop, metrics,
and the binary checkpoint format.

Every run is fully determined by its config and seeds: shuffles, dropout
masks, and per-sample augmentation draw from generators derived with
:func:`glyphnet.data.derive_rng`, so repeated runs produce bit-identical
checkpoints and byte-identical reports.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import AugmentConfig, Dataset, FoldPlan, Sample, augment, derive_rng, stratified_kfold
from .exceptions import (
    BadMagic,
    EmptyBatch,
    EmptyDataset,
    GlyphnetError,
    InvalidConfig,
    InvalidLabel,
    NonFiniteGradient,
    TruncatedFile,
    VersionMismatch,
)
from .layers import Model, ModelConfig, build_model
from .tensor import DTYPE, Graph, Tensor, add, backward, exp, log, mul, reduce, sub

__all__ = [
    "SchedulerConfig",
    "TrainConfig",
    "OptimizerState",
    "PlateauScheduler",
    "ConfusionMatrix",
    "MetricsReport",
    "EpochSummary",
    "Checkpoint",
    "CrossValResult",
    "cross_entropy_loss",
    "adamw_step",
    "train_epoch",
    "evaluate",
    "metric_defs",
    "run_cross_validation",
    "fit_model",
    "checkpoint_from_model",
    "restore_model",
    "restore_optimizer",
    "save_checkpoint",
    "load_checkpoint",
]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-6
    threshold: float = 1e-4  # absolute improvement needed to reset patience

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise InvalidConfig(f"scheduler factor must be in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise InvalidConfig("scheduler patience must be >= 0")
        if self.min_lr < 0:
            raise InvalidConfig("min_lr must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seed: int = 0
    k_folds: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if not self.lr > self.scheduler.min_lr:
            raise InvalidConfig(f"lr must exceed min_lr, got {self.lr} <= {self.scheduler.min_lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidConfig(f"betas must be in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise InvalidConfig("eps must be > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "scheduler": {
                "factor": self.scheduler.factor,
                "patience": self.scheduler.patience,
                "min_lr": self.scheduler.min_lr,
                "threshold": self.scheduler.threshold,
            },
            "seed": self.seed,
            "k_folds": self.k_folds,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        sched = d.pop("scheduler", {})
        betas = tuple(d.pop("betas", (0.9, 0.999)))
        return cls(betas=betas, scheduler=SchedulerConfig(**sched), **d)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log softmax of the target class, via stable log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.size == 0 or n == 0:
        raise EmptyBatch("cross entropy over an empty batch")
    if targets.shape != (n,):
        raise InvalidLabel(f"expected {n} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise InvalidLabel(f"labels must lie in [0, {c}), got {targets.min()}..{targets.max()}")

    onehot = np.zeros((n, c), dtype=DTYPE)
    onehot[np.arange(n), targets] = 1.0
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    exps = exp(sub(logits, shift))
    lse = add(log(reduce("sum", exps, axes=(1,), keep_dims=True)), shift)
    target_logit = reduce("sum", mul(logits, Tensor(onehot)), axes=(1,), keep_dims=True)
    return reduce("mean", sub(lse, target_logit))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> None:
    """One AdamW update with decoupled decay applied to pre-update values.

    ``lr`` overrides ``cfg.lr`` so the plateau scheduler can drive the rate
    all the way down to ``min_lr`` without rebuilding the config.
    """
    step_lr = cfg.lr if lr is None else lr
    state.t += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g is None or not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name} is missing or not finite")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= step_lr * m_hat / (np.sqrt(v_hat) + cfg.eps) + (
            step_lr * cfg.weight_decay
        ) * p.data


class PlateauScheduler:
    """Multiply lr by ``factor`` once val loss stalls past ``patience`` epochs."""

    def __init__(self, lr: float, cfg: SchedulerConfig):
        self.lr = lr
        self.cfg = cfg
        self.best = float("inf")
        self.counter = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise ValueError(f"validation loss must be finite, got {val_loss}")
        if val_loss < self.best - self.cfg.threshold:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter > self.cfg.patience:
                self.lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
                self.counter = 0
        return self.lr


# ---------------------------------------------------------------------------
# epoch loops


@dataclass
class EpochSummary:
    mean_loss: float
    accuracy: float


def _batch_tensor(images: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(images).astype(DTYPE))


def train_epoch(
    model: Model,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    opt_state: OptimizerState,
    *,
    epoch: int = 0,
    fold: int = 0,
    augment_cfg: AugmentConfig | None = None,
    sample_indices: Sequence[int] | None = None,
    lr: float | None = None,
) -> EpochSummary:
    """Shuffle, then run forward/backward/AdamW over every batch once.

    ``sample_indices`` are the dataset-global indices of ``samples``; they
    key the per-sample augmentation streams so results do not depend on how
    the data was sharded into folds or batches.  ``lr`` carries the current
    scheduled rate when it differs from ``cfg.lr``.
    """
    if not samples:
        raise EmptyDataset("cannot train on zero samples")
    model.train()
    n = len(samples)
    order = derive_rng(cfg.seed, fold, epoch, 1).permutation(n)

    loss_total = 0.0
    correct = 0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        chunk = order[start : start + cfg.batch_size]
        images = []
        for j in chunk:
            s = samples[j]
            if augment_cfg is not None:
                global_idx = int(sample_indices[j]) if sample_indices is not None else int(j)
                s = augment(s, augment_cfg, derive_rng(augment_cfg.seed, global_idx, epoch))
            images.append(s.image.data)
        x = _batch_tensor(images)
        y = np.array([samples[j].label for j in chunk], dtype=np.int64)

        drop_rng = derive_rng(cfg.seed, fold, epoch, b, 2)
        with Graph() as g:
            logits = model.forward(x, rng=drop_rng)
            loss = cross_entropy_loss(logits, y)
        model.zero_grads()
        backward(loss, g)
        adamw_step(model.params, {k: t.grad for k, t in model.params.items()},
                   opt_state, cfg, lr=lr)

        loss_total += loss.item() * len(chunk)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return EpochSummary(mean_loss=loss_total / n, accuracy=correct / n)


# ---------------------------------------------------------------------------
# evaluation and metrics


@dataclass
class ConfusionMatrix:
    """3x3 counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_lists(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.counts]


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[dict]
    flagged: list[int]
    fold_id: int = -1

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "flagged": self.flagged,
        }


def metric_defs(cm: ConfusionMatrix, fold_id: int = -1) -> MetricsReport:
    """Per-class precision/recall/F1 and their macro (unweighted) means.

    A class with a zero denominator scores 0 and is listed in ``flagged``
    so degenerate runs still produce a complete report.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise EmptyDataset("confusion matrix is empty")
    n_classes = counts.shape[0]
    per_class = []
    flagged = []
    for c in range(n_classes):
        tp = float(counts[c, c])
        fp = float(counts[:, c].sum()) - tp
        fn = float(counts[c, :].sum()) - tp
        if tp + fp == 0 or tp + fn == 0:
            flagged.append(c)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append({"precision": precision, "recall": recall, "f1": f1})
    return MetricsReport(
        accuracy=float(np.trace(counts) / total),
        macro_precision=sum(p["precision"] for p in per_class) / n_classes,
        macro_recall=sum(p["recall"] for p in per_class) / n_classes,
        macro_f1=sum(p["f1"] for p in per_class) / n_classes,
        per_class=per_class,
        flagged=flagged,
        fold_id=fold_id,
    )


def evaluate(
    model: Model, samples: Sequence[Sample], batch_size: int = 256
) -> tuple[ConfusionMatrix, MetricsReport, float]:
    """Argmax predictions (ties to the lowest class) on clean samples."""
    if not samples:
        raise EmptyDataset("cannot evaluate zero samples")
    prev_mode = model.mode
    model.eval()
    n_classes = model.config.num_classes
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    loss_total = 0.0
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = _batch_tensor([s.image.data for s in chunk])
            y = np.array([s.label for s in chunk], dtype=np.int64)
            logits = model.forward(x)
            loss_total += cross_entropy_loss(logits, y).item() * len(chunk)
            preds = logits.data.argmax(axis=1)
            np.add.at(counts, (y, preds), 1)
    finally:
        model.mode = prev_mode
    cm = ConfusionMatrix(counts)
    return cm, metric_defs(cm), loss_total / len(samples)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"LXGC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Serialized model snapshot: config, named tensors, run metadata.

    ``tensors`` holds parameters and BN running statistics under their model
    names, plus optional optimizer moments under ``opt.m:``/``opt.v:`` keys.
    """

    version: int
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict


def checkpoint_from_model(
    model: Model, metadata: dict, optimizer: OptimizerState | None = None
) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {
        name: t.data.copy() for name, t in model.params.items()
    }
    for name, arr in model.state_arrays().items():
        tensors[name] = arr.copy()
    metadata = dict(metadata)
    if optimizer is not None:
        metadata["optimizer_t"] = optimizer.t
        for name in model.params:
            tensors[f"opt.m:{name}"] = optimizer.m[name].copy()
            tensors[f"opt.v:{name}"] = optimizer.v[name].copy()
    return Checkpoint(CHECKPOINT_VERSION, model.config, tensors, metadata)


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the architecture and overwrite its buffers bit-for-bit."""
    model = build_model(ckpt.model_config, derive_rng(0))
    for name, t in model.params.items():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing parameter {name}")
        src = ckpt.tensors[name]
        if src.shape != t.data.shape:
            raise ValueError(f"parameter {name}: shape {src.shape} != {t.data.shape}")
        t.data[...] = src
    for name, arr in model.state_arrays().items():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint is missing statistic {name}")
        arr[...] = ckpt.tensors[name]
    return model.eval()


def restore_optimizer(ckpt: Checkpoint, model: Model) -> OptimizerState | None:
    if "optimizer_t" not in ckpt.metadata:
        return None
    state = OptimizerState.fresh(model.params)
    state.t = int(ckpt.metadata["optimizer_t"])
    for name in model.params:
        state.m[name][...] = ckpt.tensors[f"opt.m:{name}"]
        state.v[name][...] = ckpt.tensors[f"opt.v:{name}"]
    return state


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta_doc = {
        "model_config": ckpt.model_config.to_dict(),
        "run": ckpt.metadata,
    }
    meta_bytes = json.dumps(meta_doc, sort_keys=True, separators=(",", ":")).encode()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", ckpt.version)
    buf += struct.pack("<Q", len(meta_bytes))
    buf += meta_bytes
    for name, arr in ckpt.tensors.items():
        name_b = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFile(f"checkpoint ends early at byte {len(data)} (needed {pos + n})")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    meta_doc = json.loads(take(meta_len).decode())
    model_config = ModelConfig.from_dict(meta_doc["model_config"])

    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        raw = take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(DTYPE)
    return Checkpoint(version, model_config, tensors, meta_doc["run"])


# ---------------------------------------------------------------------------
# cross-validation harness


@dataclass
class CrossValResult:
    fold_reports: list[MetricsReport]
    fold_confusions: list[ConfusionMatrix]
    histories: list[list[dict]]
    fold_plan: FoldPlan
    best_fold: int
    best_val_accuracy: float
    best_checkpoints: list[Checkpoint]
    checkpoint_paths: list[Path]
    test_report: MetricsReport | None = None
    test_confusion: ConfusionMatrix | None = None


def run_cross_validation(
    dataset: Dataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig | None = None,
    out_dir=None,
    test_dataset: Dataset | None = None,
    log: Callable[[str], None] | None = None,
) -> CrossValResult:
    """Train one fresh model per fold, checkpointing on val-accuracy gains.

    Each fold's reported metrics are the ones from its best epoch.  With a
    test dataset, the overall best checkpoint (ties broken toward the lower
    fold index) is evaluated on it once at the end.
    """
    plan = stratified_kfold(dataset.labels(), cfg.k_folds, cfg.seed)
    fold_reports: list[MetricsReport] = []
    fold_confusions: list[ConfusionMatrix] = []
    histories: list[list[dict]] = []
    best_checkpoints: list[Checkpoint] = []
    checkpoint_paths: list[Path] = []

    for fold in range(cfg.k_folds):
        try:
            tr_idx = plan.train_indices(fold)
            va_idx = plan.val_indices(fold)
            train_samples = [dataset.samples[i] for i in tr_idx]
            val_samples = [dataset.samples[i] for i in va_idx]

            model = build_model(model_config, derive_rng(cfg.seed, fold, 11))
            opt_state = OptimizerState.fresh(model.params)
            sched = PlateauScheduler(cfg.lr, cfg.scheduler)

            best_acc = -1.0
            best_ckpt = None
            best_report = None
            best_cm = None
            history: list[dict] = []
            for epoch in range(cfg.epochs):
                summary = train_epoch(
                    model,
                    train_samples,
                    cfg,
                    opt_state,
                    epoch=epoch,
                    fold=fold,
                    augment_cfg=augment_cfg,
                    sample_indices=tr_idx,
                    lr=sched.lr,
                )
                cm, report, val_loss = evaluate(model, val_samples)
                history.append(
                    {
                        "epoch": epoch,
                        "lr": sched.lr,
                        "train_loss": summary.mean_loss,
                        "train_accuracy": summary.accuracy,
                        "val_loss": val_loss,
                        "val_accuracy": report.accuracy,
                    }
                )
                sched.step(val_loss)
                if report.accuracy > best_acc:
                    best_acc = report.accuracy
                    best_ckpt = checkpoint_from_model(
                        model,
                        {
                            "seed": cfg.seed,
                            "fold": fold,
                            "epoch": epoch,
                            "val_accuracy": report.accuracy,
                            "class_names": dataset.class_names,
                        },
                    )
                    best_report = replace(report, fold_id=fold)
                    best_cm = cm
                if log:
                    log(
                        f"fold {fold + 1} epoch {epoch + 1}/{cfg.epochs}: "
                        f"train_loss={summary.mean_loss:.4f} val_acc={report.accuracy:.4f}"
                    )
        except GlyphnetError as e:
            raise type(e)(f"fold {fold}: {e}") from e

        fold_reports.append(best_report)
        fold_confusions.append(best_cm)
        histories.append(history)
        best_checkpoints.append(best_ckpt)
        if out_dir is not None:
            fold_dir = Path(out_dir) / "folds" / f"fold{fold + 1}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = fold_dir / "best.ckpt"
            save_checkpoint(best_ckpt, ckpt_path)
            checkpoint_paths.append(ckpt_path)

    accs = np.array([r.accuracy for r in fold_reports])
    best_fold = int(accs.argmax())  # ties resolve to the lowest index
    result = CrossValResult(
        fold_reports=fold_reports,
        fold_confusions=fold_confusions,
        histories=histories,
        fold_plan=plan,
        best_fold=best_fold,
        best_val_accuracy=float(accs[best_fold]),
        best_checkpoints=best_checkpoints,
        checkpoint_paths=checkpoint_paths,
    )
    if test_dataset is not None:
        best_model = restore_model(best_checkpoints[best_fold])
        cm, report, _ = evaluate(best_model, test_dataset.samples)
        result.test_report = report
        result.test_confusion = cm
    return result


# ---------------------------------------------------------------------------
# plain (non-CV) training, shared by the estimator and the train command


def fit_model(
    samples: Sequence[Sample],
    model_config: ModelConfig,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig | None = None,
    init: Checkpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[Model, OptimizerState, list[dict]]:
    """Train on all given samples; the scheduler steps on the train loss."""
    if init is not None:
        model = restore_model(init)
    else:
        model = build_model(model_config, derive_rng(cfg.seed, 0, 11))
    opt_state = OptimizerState.fresh(model.params)
    sched = PlateauScheduler(cfg.lr, cfg.scheduler)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        summary = train_epoch(
            model, samples, cfg, opt_state, epoch=epoch, augment_cfg=augment_cfg,
            lr=sched.lr,
        )
        history.append(
            {
                "epoch": epoch,
                "lr": sched.lr,
                "train_loss": summary.mean_loss,
                "train_accuracy": summary.accuracy,
            }
        )
        sched.step(summary.mean_loss)
        if log:
            log(
                f"epoch {epoch + 1}/{cfg.epochs}: "
                f"loss={summary.mean_loss:.4f} acc={summary.accuracy:.4f}"
            )
    return model.eval(), opt_state, history
