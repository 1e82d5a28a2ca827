"""
One-axis ablations.

Each variant changes a single config field (or a small group of them), then trains
and evaluates from the same seed, so variants differ only on the ablated axis.
"""
import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel
from tqdm import tqdm

from app.models.schemas import RunConfig
from app.services.data import DatasetSplit, ViewDataset
from app.services.training import config_for_dataset, evaluate_accuracy, fit
from app.utils import constants
from app.utils.config import settings, with_overrides
from app.utils.context_container import RunContext
from app.utils.error_handler import ConfigError

logger = logging.getLogger(__name__)

# axis -> values tried when none are given
DEFAULT_VALUES: Dict[str, List[str]] = {
    "blocks": ["0", "1", "2", "4"],
    "heads": ["1", "2", "4", "8"],
    "mlp-ratio": ["1", "2", "4"],
    "dim": ["64", "128", "256"],
    "pos-enc": ["off", "on"],
    "cls-token": ["off", "on"],
    "transition": ["max", "mean", "concat_max_mean"],
    "decoder": ["none", "512", "1024-512"],
    "views": ["1", "4", "8", "12", "20"],
    "initializer": ["shallow_conv_1", "shallow_conv_2"],
    "optimizer": ["adamw", "adam", "sgd"],
    "stages": ["1-stage", "2-stage"],
}

_SWITCH = {"on": "true", "off": "false", "true": "true", "false": "false"}


class AblationRow(BaseModel):
    axis: str
    value: str
    seed: int
    parameters: int
    stage1_acc: float
    instance_accuracy: float
    class_accuracy: float


def variant_overrides(axis: str, value: str) -> Dict[str, Any]:
    """Dotted config overrides that realize one variant"""
    if axis not in constants.ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{axis}'; valid axes: {', '.join(constants.ABLATION_AXES)}")
    value = value.strip()
    if axis == "blocks":
        return {"encoder.num_blocks": value}
    if axis == "heads":
        return {"encoder.num_heads": value}
    if axis == "mlp-ratio":
        return {"encoder.mlp_ratio": value}
    if axis == "dim":
        return {"encoder.view_dim": value}
    if axis in ("pos-enc", "cls-token"):
        if value not in _SWITCH:
            raise ConfigError(f"axis '{axis}' takes on/off, got '{value}'")
        field = "use_position_encoding" if axis == "pos-enc" else "use_class_token"
        return {f"encoder.{field}": _SWITCH[value]}
    if axis == "transition":
        return {"head.transition_kind": value}
    if axis == "decoder":
        return {"head.decoder_hidden": "" if value == "none" else value.replace("-", ",")}
    if axis == "views":
        return {"train.num_views": value}
    if axis == "initializer":
        return {"initializer.kind": value}
    if axis == "optimizer":
        return {"optimizer.kind": value}
    if value not in ("1-stage", "2-stage"):
        raise ConfigError(f"axis 'stages' takes 1-stage or 2-stage, got '{value}'")
    return {"stage1.skip": "true" if value == "1-stage" else "false"}


def run_variant(
    cfg: RunConfig,
    dataset: ViewDataset,
    parts: DatasetSplit,
    axis: str,
    value: str,
    seed: int,
) -> AblationRow:
    variant = with_overrides(cfg, {**variant_overrides(axis, value), "seed": seed})
    context = RunContext(seed)
    model, _, stage1_acc = fit(variant, dataset, parts.train, parts.val, context)
    eval_ids = parts.test or parts.val
    report = evaluate_accuracy(model, dataset, eval_ids, variant.train.target, variant.train.num_views, seed)
    row = AblationRow(
        axis=axis,
        value=value,
        seed=seed,
        parameters=model.count_parameters(),
        stage1_acc=stage1_acc,
        instance_accuracy=report.instance_accuracy,
        class_accuracy=report.class_accuracy,
    )
    logger.info(f"Ablation {axis}={value} seed={seed}: inst={row.instance_accuracy:.4f} class={row.class_accuracy:.4f}")
    return row


def _validate_variant(cfg: RunConfig, dataset: ViewDataset, axis: str, value: str) -> None:
    """Raise ConfigError for a variant that cannot be built or trained on this dataset"""
    variant = config_for_dataset(with_overrides(cfg, variant_overrides(axis, value)), dataset)
    num_views = variant.train.num_views
    fewest = min(record.views.shape[0] for record in dataset.records)
    if num_views is not None and num_views > fewest:
        raise ConfigError(f"{axis}={value} asks for {num_views} views but some shapes have only {fewest}")


def run_ablation(
    cfg: RunConfig,
    dataset: ViewDataset,
    parts: DatasetSplit,
    axis: str,
    values: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> List[AblationRow]:
    values = list(values) if values else DEFAULT_VALUES[axis]
    seeds = list(seeds) if seeds else [cfg.seed]
    # reject bad values before any training starts
    for value in values:
        _validate_variant(cfg, dataset, axis, value)
    jobs = [(value, seed) for seed in seeds for value in values]
    return [
        run_variant(cfg, dataset, parts, axis, value, seed)
        for value, seed in tqdm(jobs, desc=f"ablate {axis}", disable=not settings.show_progress)
    ]


ABLATION_COLUMNS = list(AblationRow.model_fields)


def format_ablation_csv(rows: Sequence[AblationRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for row in rows:
        data = row.model_dump()
        writer.writerow([repr(float(data[c])) if isinstance(data[c], float) else data[c] for c in ABLATION_COLUMNS])
    return buffer.getvalue()


def write_ablation_csv(path: Union[str, Path], rows: Sequence[AblationRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_ablation_csv(rows))
    logger.info(f"Wrote {len(rows)} ablation rows to {path}")
