"""
Two-stage optimization.

Stage 1 trains the initializer alone behind a throwaway per-view classifier.
Stage 2 trains the whole model on label-smoothed cross-entropy under the
warmup-restart cosine schedule, feeding every shape's views in a fresh random
order each epoch.
"""
import csv
import io
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from app.models.schemas import AccuracyReport, EpochLog, OptimizerConfig, RunConfig, ScheduleConfig
from app.services.data import ViewDataset, subset_views
from app.services.head import VSFormer, build_model, predict_many, smoothed_cross_entropy
from app.services.numerics import Parameter, backward, glorot_uniform, matmul, mean_rows
from app.utils import constants
from app.utils.config import settings
from app.utils.context_container import RunContext
from app.utils.error_handler import ConfigError, InputError, StateError

logger = logging.getLogger(__name__)

# permutation sub-stream keys, so the two stages never share draws
STAGE1_KEY = 1
STAGE2_KEY = 2


# ===== SCHEDULES =====

def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Learning rate at a fractional epoch"""
    if not 0 <= epoch <= cfg.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.kind == "cosine":
        return cfg.peak_lr * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs)) / 2.0

    interval = math.floor(epoch / cfg.interval_epochs)
    position = epoch - interval * cfg.interval_epochs
    peak = cfg.peak_lr
    for _ in range(interval):
        peak *= 1.0 - cfg.peak_decay
    if position < cfg.warmup_epochs:
        return peak * position / cfg.warmup_epochs
    t = (position - cfg.warmup_epochs) / (cfg.interval_epochs - cfg.warmup_epochs)
    return peak * (1.0 + math.cos(math.pi * t)) / 2.0


def schedule_rows(cfg: ScheduleConfig, step: float = 0.5) -> List[Tuple[float, float]]:
    if not step > 0:
        raise InputError(f"schedule step must be positive, got {step}")
    count = int(math.floor(cfg.total_epochs / step + 1e-9))
    return [(k * step, lr_at(k * step, cfg)) for k in range(count + 1)]


def format_schedule_csv(rows: Sequence[Tuple[float, float]]) -> str:
    lines = ["epoch,lr"]
    lines.extend(f"{epoch:g},{constants.SCHEDULE_FLOAT_FORMAT.format(lr)}" for epoch, lr in rows)
    return "\n".join(lines) + "\n"


def cosine_anneal(base_lr: float, epoch: int, epochs: int) -> float:
    """Per-epoch cosine annealing from base_lr towards 0"""
    return base_lr * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


# ===== OPTIMIZERS =====

def sgd_step(params: Sequence[Parameter], lr: float, momentum: float, buffers: List[Optional[np.ndarray]]) -> None:
    """buf <- momentum * buf + g; p <- p - lr * buf (buf starts at g)"""
    for index, p in enumerate(params):
        grad = p.grad
        if momentum > 0:
            buffers[index] = grad.copy() if buffers[index] is None else momentum * buffers[index] + grad
            grad = buffers[index]
        p.assign(p.data - lr * grad)


def adamw_step(
    params: Sequence[Parameter],
    lr: float,
    first: List[np.ndarray],
    second: List[np.ndarray],
    step: int,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
    decoupled: bool = True,
) -> None:
    """
    One bias-corrected Adam update at step number `step` (counting from 1).

    decoupled=True shrinks parameters by lr * weight_decay * p outside the moment
    estimates; decoupled=False folds weight_decay * p into the gradient instead.
    """
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for index, p in enumerate(params):
        grad = p.grad if decoupled or weight_decay == 0 else p.grad + weight_decay * p.data
        first[index] = beta1 * first[index] + (1.0 - beta1) * grad
        second[index] = beta2 * second[index] + (1.0 - beta2) * grad * grad
        update = (first[index] / correction1) / (np.sqrt(second[index] / correction2) + eps)
        if decoupled:
            update = update + weight_decay * p.data
        p.assign(p.data - lr * update)


class Optimizer:
    """Holds per-parameter state for a fixed, named parameter list"""

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]]):
        self.names = [name for name, _ in named_params]
        self.params = [p for _, p in named_params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        raise NotImplementedError

    def state(self) -> Dict[str, np.ndarray]:
        return {"steps": np.array([float(self.steps)])}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        if "steps" in state:
            self.steps = int(state["steps"][0])

    def _load_slots(self, state: Dict[str, np.ndarray], slot: str, target: List) -> None:
        for index, (name, p) in enumerate(zip(self.names, self.params)):
            key = f"{slot}.{name}"
            if key in state:
                if state[key].shape != p.shape:
                    raise StateError(f"optimizer slot '{key}' has shape {state[key].shape}, parameter has {p.shape}")
                target[index] = state[key].copy()


class SGD(Optimizer):
    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], momentum: float = 0.0):
        super().__init__(named_params)
        self.momentum = momentum
        self.buffers: List[Optional[np.ndarray]] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        self.steps += 1
        sgd_step(self.params, lr, self.momentum, self.buffers)

    def state(self) -> Dict[str, np.ndarray]:
        out = super().state()
        out.update({f"momentum.{n}": b for n, b in zip(self.names, self.buffers) if b is not None})
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        super().load_state(state)
        self._load_slots(state, "momentum", self.buffers)


class AdamW(Optimizer):
    """Adam with decoupled weight decay; decoupled=False gives Adam with an L2 term"""

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], cfg: OptimizerConfig, decoupled: bool = True):
        super().__init__(named_params)
        self.cfg = cfg
        self.decoupled = decoupled
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.steps += 1
        adamw_step(
            self.params, lr, self.first, self.second, self.steps,
            self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay, self.decoupled,
        )

    def state(self) -> Dict[str, np.ndarray]:
        out = super().state()
        out.update({f"m.{n}": m for n, m in zip(self.names, self.first)})
        out.update({f"v.{n}": v for n, v in zip(self.names, self.second)})
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        super().load_state(state)
        self._load_slots(state, "m", self.first)
        self._load_slots(state, "v", self.second)


def build_optimizer(cfg: OptimizerConfig, named_params: Sequence[Tuple[str, Parameter]]) -> Optimizer:
    if cfg.kind == "sgd":
        return SGD(named_params, cfg.momentum)
    return AdamW(named_params, cfg, decoupled=cfg.kind == "adamw")


# ===== HELPERS =====

def _check_ids(dataset: ViewDataset, ids: Sequence[str], what: str) -> None:
    if not ids:
        raise InputError(f"{what} is empty")
    for shape_id in ids:
        dataset.record(shape_id)


def _training_views(views: np.ndarray, num_views: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """A random permutation of the views, or of a random subset of them"""
    order = rng.permutation(views.shape[0])
    if num_views is not None:
        if num_views > views.shape[0]:
            raise InputError(f"cannot select {num_views} views from a set of {views.shape[0]}")
        order = order[:num_views]
    return views[order]


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    return [order[start:start + batch_size] for start in range(0, len(order), batch_size)]


def _progress(iterable, desc: str):
    return tqdm(iterable, desc=desc, disable=not settings.show_progress, leave=False)


# ===== STAGE 1 =====

def train_stage1(
    model: VSFormer,
    dataset: ViewDataset,
    ids: Sequence[str],
    cfg: RunConfig,
    context: RunContext,
) -> float:
    """
    Train model.init behind a temporary per-view affine classifier whose view
    logits are mean-pooled. Returns training accuracy of the last epoch (0.0 when
    stage 1 runs zero epochs). The temporary classifier is discarded.
    """
    _check_ids(dataset, ids, "stage-1 training set")
    target = cfg.train.target
    num_classes = model.num_classes
    epochs = cfg.stage1.epochs
    if epochs == 0 or cfg.stage1.skip:
        logger.info("Stage 1 skipped; initializer keeps its random weights")
        return 0.0

    head_rng = context.rng("init", STAGE1_KEY)
    head_w = Parameter(glorot_uniform(head_rng, model.init.output_dim, num_classes), name="stage1.w")
    head_b = Parameter(np.zeros(num_classes), name="stage1.b")
    named = list(model.init.named_parameters("init")) + [("stage1.w", head_w), ("stage1.b", head_b)]
    optimizer = SGD(named, cfg.stage1.momentum)
    smoothing = cfg.head.label_smoothing

    model.init.train()
    accuracy = 0.0
    for epoch in _progress(range(epochs), "stage 1"):
        lr = cosine_anneal(cfg.stage1.lr, epoch, epochs)
        rng = context.rng("permutation", STAGE1_KEY, epoch)
        order = rng.permutation(len(ids))
        total_loss, correct = 0.0, 0
        for batch in _batches(order, cfg.train.batch_size):
            optimizer.zero_grad()
            for position in batch:
                record = dataset.record(ids[position])
                label = dataset.target(record.shape_id, target)
                views = _training_views(record.views, cfg.train.num_views, rng)
                logits = mean_rows(matmul(model.init.forward(views, True), head_w) + head_b)
                loss = smoothed_cross_entropy(logits, label, smoothing)
                total_loss += loss.item()
                correct += int(np.argmax(logits.data[0]) == label)
                backward(loss * (1.0 / len(batch)))
            optimizer.step(lr)
        accuracy = correct / len(ids)
        logger.info(f"Stage 1 epoch {epoch}: lr={lr:.3e} loss={total_loss / len(ids):.4f} acc={accuracy:.4f}")
    context.store_stage_output("stage1", {"train_acc": accuracy, "epochs": epochs})
    return accuracy


# ===== STAGE 2 =====

def stage2_parameters(model: VSFormer, cfg: RunConfig) -> List[Tuple[str, Parameter]]:
    """Named parameters stage 2 updates; a frozen initializer is left out"""
    return [
        (key, p) for key, p in model.named_parameters()
        if not (cfg.train.freeze_initializer and key.startswith("init."))
    ]


def train_stage2(
    model: VSFormer,
    dataset: ViewDataset,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    cfg: RunConfig,
    context: RunContext,
    optimizer: Optional[Optimizer] = None,
    start_epoch: int = 0,
    on_epoch: Optional[Callable[[EpochLog, Optimizer], None]] = None,
) -> Tuple[List[EpochLog], Optimizer]:
    """Joint training over [start_epoch, total_epochs); returns the epoch log and the optimizer"""
    _check_ids(dataset, train_ids, "stage-2 training set")
    schedule = cfg.schedule
    if not 0 <= start_epoch <= schedule.total_epochs:
        raise ConfigError(f"cannot resume at epoch {start_epoch} of a {schedule.total_epochs}-epoch schedule")

    if optimizer is None:
        optimizer = build_optimizer(cfg.optimizer, stage2_parameters(model, cfg))

    target = cfg.train.target
    model.train()
    if cfg.train.freeze_initializer:
        model.init.eval()

    logs: List[EpochLog] = []
    for epoch in _progress(range(start_epoch, schedule.total_epochs), "stage 2"):
        rng = context.rng("permutation", STAGE2_KEY, epoch)
        dropout_rng = context.rng("dropout", epoch)
        order = rng.permutation(len(train_ids))
        batches = _batches(order, cfg.train.batch_size)
        total_loss, correct = 0.0, 0
        for index, batch in enumerate(batches):
            lr = lr_at(epoch + index / len(batches), schedule)
            optimizer.zero_grad()
            for position in batch:
                record = dataset.record(train_ids[position])
                label = dataset.target(record.shape_id, target)
                views = _training_views(record.views, cfg.train.num_views, rng)
                loss, logits = model.loss(views, label, training=True, rng=dropout_rng)
                total_loss += loss.item()
                correct += int(np.argmax(logits.data[0]) == label)
                backward(loss * (1.0 / len(batch)))
            optimizer.step(lr)

        entry = EpochLog(
            epoch=epoch,
            lr=lr_at(epoch, schedule),
            train_loss=total_loss / len(train_ids),
            train_acc=correct / len(train_ids),
        )
        if val_ids:
            report = evaluate_accuracy(model, dataset, val_ids, target, cfg.train.num_views, context.seed)
            entry.val_class_acc = report.class_accuracy
            entry.val_inst_acc = report.instance_accuracy
            model.train()
            if cfg.train.freeze_initializer:
                model.init.eval()
        logs.append(entry)
        logger.info(
            f"Stage 2 epoch {epoch}: lr={entry.lr:.3e} loss={entry.train_loss:.4f} "
            f"acc={entry.train_acc:.4f} val_inst={entry.val_inst_acc}"
        )
        if on_epoch is not None:
            on_epoch(entry, optimizer)

    model.trained = True
    model.eval()
    context.store_stage_output("stage2", logs)
    return logs, optimizer


# ===== EVALUATION =====

def evaluation_views(dataset: ViewDataset, shape_id: str, num_views: Optional[int], seed: int) -> np.ndarray:
    """Stored views, or a subset fixed per shape by the seed"""
    views = dataset.record(shape_id).views
    if num_views is None or num_views == views.shape[0]:
        return views
    return subset_views(views, num_views, seed, key=dataset.position(shape_id))


def accuracy_report(predictions: Sequence[int], targets: Sequence[int]) -> AccuracyReport:
    """Instance accuracy = correct / total; class accuracy = mean of per-class accuracies"""
    if not targets:
        raise InputError("cannot compute accuracy over zero shapes")
    hits: Dict[int, List[int]] = {}
    for predicted, actual in zip(predictions, targets):
        hits.setdefault(actual, []).append(int(predicted == actual))
    per_class = {label: sum(v) / len(v) for label, v in sorted(hits.items())}
    return AccuracyReport(
        instance_accuracy=sum(sum(v) for v in hits.values()) / len(targets),
        class_accuracy=sum(per_class.values()) / len(per_class),
        per_class=per_class,
        count=len(targets),
    )


def evaluate_accuracy(
    model: VSFormer,
    dataset: ViewDataset,
    ids: Sequence[str],
    target: str = "label",
    num_views: Optional[int] = None,
    seed: int = 0,
) -> AccuracyReport:
    if not ids:
        raise InputError("evaluation split is empty")
    view_sets = [evaluation_views(dataset, shape_id, num_views, seed) for shape_id in ids]
    predictions = [label for _, label in predict_many(view_sets, model)]
    return accuracy_report(predictions, [dataset.target(shape_id, target) for shape_id in ids])


# ===== LOGS =====

LOG_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_class_acc", "val_inst_acc"]


def _log_cell(value) -> str:
    if value is None:
        return ""
    return str(value) if isinstance(value, int) else repr(float(value))


def format_training_log(logs: Sequence[EpochLog]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for entry in logs:
        row = entry.model_dump()
        writer.writerow([_log_cell(row[column]) for column in LOG_COLUMNS])
    return buffer.getvalue()


def write_training_log(path: Union[str, Path], logs: Sequence[EpochLog]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_training_log(logs))
    logger.info(f"Wrote {len(logs)} epoch rows to {path}")


def read_training_log(path: Union[str, Path]) -> List[EpochLog]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    return [EpochLog(**{key: (value or None) for key, value in row.items()}) for row in rows]


# ===== PIPELINE =====

def config_for_dataset(cfg: RunConfig, dataset: ViewDataset) -> RunConfig:
    """Fill the initializer's input geometry from the dataset when the config leaves it open"""
    if not len(dataset):
        raise InputError("dataset is empty")
    view_shape = dataset.view_shape
    init = cfg.initializer
    if init.kind == "precomputed":
        if len(view_shape) != 1:
            raise ConfigError(
                f"dataset views have shape {view_shape}; image views need "
                f"initializer.kind=shallow_conv_1 or shallow_conv_2"
            )
        if init.feature_dim is None:
            init = init.model_copy(update={"feature_dim": view_shape[0]})
    elif len(view_shape) == 3:
        channels, height, width = view_shape
        init = init.model_copy(update={"view_channels": channels, "view_height": height, "view_width": width})
    else:
        raise ConfigError(f"initializer '{init.kind}' needs image views, dataset views have shape {view_shape}")
    return cfg.model_copy(update={"initializer": init})


def fit(
    cfg: RunConfig,
    dataset: ViewDataset,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    context: RunContext,
) -> Tuple[VSFormer, List[EpochLog], float]:
    """Build a model for the configured target and run both stages"""
    cfg = config_for_dataset(cfg, dataset)
    model = build_model(cfg, dataset.num_targets(cfg.train.target), context)
    stage1_acc = train_stage1(model, dataset, train_ids, cfg, context)
    logs, _ = train_stage2(model, dataset, train_ids, val_ids, cfg, context)
    return model, logs, stage1_acc
