import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.schemas import HeadConfig, RunConfig
from app.services.encoder import ViewSetEncoder
from app.services.initializer import Views, build_initializer, initialize_view_set
from app.services.numerics import (
    Module,
    Parameter,
    Tensor,
    concat,
    glorot_uniform,
    log_softmax_rows,
    matmul,
    max_rows,
    mean_rows,
    no_grad,
    relu,
    softmax_rows,
    total,
)
from app.utils.config import settings
from app.utils.context_container import RunContext
from app.utils.error_handler import ContractError, DimensionError, InputError

logger = logging.getLogger(__name__)


# ===== TRANSITION =====

def transition(z: Tensor, kind: str) -> Tensor:
    """Pool the M x D set into a (1, G) descriptor: max, mean or [max || mean]"""
    if z.data.ndim != 2 or z.shape[0] == 0:
        raise InputError("transition needs a nonempty view set")
    if kind == "max":
        return max_rows(z)
    if kind == "mean":
        return mean_rows(z)
    if kind == "concat_max_mean":
        return concat([max_rows(z), mean_rows(z)], axis=1)
    raise InputError(f"unknown transition '{kind}'")


# ===== DECODER =====

class Decoder(Module):
    """Affine maps of widths [G, *hidden, K] with ReLU between them"""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        super().__init__()
        if len(widths) < 2:
            raise InputError(f"decoder needs at least input and output widths, got {list(widths)}")
        self.widths = list(widths)
        for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            setattr(self, f"w{index}", Parameter(glorot_uniform(rng, fan_in, fan_out)))
            setattr(self, f"b{index}", Parameter(np.zeros(fan_out)))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def layer(self, index: int) -> Tuple[Parameter, Parameter]:
        return getattr(self, f"w{index}"), getattr(self, f"b{index}")


def decode(d: Tensor, decoder: Decoder) -> Tensor:
    """Logits (1, K) from a (1, G) descriptor"""
    if d.data.ndim != 2 or d.shape[1] != decoder.widths[0]:
        raise DimensionError(f"descriptor width {d.shape[-1]} does not match decoder input {decoder.widths[0]}")
    x = d
    for index in range(1, decoder.num_layers + 1):
        w, b = decoder.layer(index)
        x = matmul(x, w) + b
        if index < decoder.num_layers:
            x = relu(x)
    return x


# ===== LOSS =====

def smoothed_targets(label: int, num_classes: int, epsilon: float) -> np.ndarray:
    """1 - eps on the true class, eps / (K - 1) on every other class"""
    if not 0 <= label < num_classes:
        raise InputError(f"label {label} outside [0, {num_classes})")
    if num_classes == 1:
        return np.ones(1)
    target = np.full(num_classes, epsilon / (num_classes - 1))
    target[label] = 1.0 - epsilon
    return target


def smoothed_cross_entropy(logits: Tensor, label: int, epsilon: float) -> Tensor:
    """-sum_k y_k log softmax(logits)_k with label-smoothed targets y"""
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise DimensionError(f"expected (1, K) logits, got {logits.shape}")
    target = smoothed_targets(label, logits.shape[1], epsilon)
    return -total(log_softmax_rows(logits) * target[None, :])


# ===== MODEL =====

class VSFormer(Module):
    """Initializer -> encoder -> transition -> decoder"""

    def __init__(self, cfg: RunConfig, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.init = build_initializer(cfg.resolved_initializer(), rng)
        self.encoder = ViewSetEncoder(cfg.encoder, rng)
        descriptor = cfg.head.descriptor_width(cfg.encoder.view_dim)
        self.decoder = Decoder([descriptor, *cfg.head.decoder_hidden, num_classes], rng)
        self.trained = False
        self.name_parameters()

    def _children(self):
        yield "init", self.init
        # encoder keys sit at the top level: block{l}.wq, pos_embed, ...
        yield "", self.encoder
        yield "decoder", self.decoder

    @property
    def head_cfg(self) -> HeadConfig:
        return self.cfg.head

    def descriptor(
        self,
        views: Views,
        training: Optional[bool] = None,
        rng: Optional[np.random.Generator] = None,
        attention_sink: Optional[List[np.ndarray]] = None,
    ) -> Tensor:
        training = self.training if training is None else training
        # a frozen initializer is switched to eval mode and keeps its running statistics
        z0 = initialize_view_set(views, self.init, training and self.init.training)
        z = self.encoder.forward(z0, training, rng, attention_sink)
        return transition(z, self.head_cfg.transition_kind)

    def forward(
        self,
        views: Views,
        training: Optional[bool] = None,
        rng: Optional[np.random.Generator] = None,
        attention_sink: Optional[List[np.ndarray]] = None,
    ) -> Tensor:
        return decode(self.descriptor(views, training, rng, attention_sink), self.decoder)

    def loss(self, views: Views, label: int, training: bool, rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        logits = self.forward(views, training, rng)
        return smoothed_cross_entropy(logits, label, self.head_cfg.label_smoothing), logits


def build_model(cfg: RunConfig, num_classes: int, context: RunContext) -> VSFormer:
    if cfg.head.num_classes is not None and cfg.head.num_classes != num_classes:
        raise InputError(f"head.num_classes={cfg.head.num_classes} but the dataset has {num_classes} classes")
    model = VSFormer(cfg, num_classes, context.rng("init"))
    logger.info(f"Built model with {model.count_parameters()} parameters ({num_classes} classes)")
    return model


def predict(views: Views, model: VSFormer) -> Tuple[np.ndarray, int]:
    """Class distribution and argmax (lowest index wins ties), eval mode"""
    with no_grad():
        logits = model.forward(views, training=False)
        probs = softmax_rows(logits).data[0]
    return probs, int(np.argmax(probs))


def predict_many(view_sets: Sequence[Views], model: VSFormer, max_workers: Optional[int] = None) -> List[Tuple[np.ndarray, int]]:
    """predict over many sets; parameters are shared read-only across threads"""
    workers = max_workers or settings.MAX_WORKERS
    if workers <= 1 or len(view_sets) <= 1:
        return [predict(views, model) for views in view_sets]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda views: predict(views, model), view_sets))


def parameter_breakdown(model: VSFormer) -> Dict[str, int]:
    return {
        "initializer": model.init.count_parameters(),
        "encoder": model.encoder.count_parameters(),
        "decoder": model.decoder.count_parameters(),
        "total": model.count_parameters(),
    }


# ===== PREDICTION FILES =====

PREDICTION_COLUMNS = ["shape_id", "predicted_class", "confidence"]


def _check_aligned(shape_ids: Sequence[str], results: Sequence[Tuple[np.ndarray, int]]) -> None:
    if len(shape_ids) != len(results):
        raise ContractError(f"{len(shape_ids)} shape ids for {len(results)} predictions")


def format_predictions(shape_ids: Sequence[str], results: Sequence[Tuple[np.ndarray, int]]) -> str:
    """shape_id,predicted_class,confidence with the argmax probability as confidence"""
    _check_aligned(shape_ids, results)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for shape_id, (probs, label) in zip(shape_ids, results):
        writer.writerow([shape_id, label, repr(float(probs[label]))])
    return buffer.getvalue()


def format_distributions(shape_ids: Sequence[str], results: Sequence[Tuple[np.ndarray, int]]) -> str:
    _check_aligned(shape_ids, results)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    width = len(results[0][0]) if results else 0
    writer.writerow(["shape_id", *(f"p{k}" for k in range(width))])
    for shape_id, (probs, _) in zip(shape_ids, results):
        writer.writerow([shape_id, *(repr(float(p)) for p in probs)])
    return buffer.getvalue()
