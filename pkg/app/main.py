import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np

from app.models.schemas import RunConfig
from app.services import checkpoint as ckpt
from app.services.ablation import format_ablation_csv, run_ablation, write_ablation_csv
from app.services.data import (
    SPLIT_NAMES,
    DatasetSplit,
    ViewDataset,
    generate_synthetic,
    load_dataset,
    read_split,
    save_dataset,
    split,
    write_split,
)
from app.services.head import (
    VSFormer,
    build_model,
    format_distributions,
    format_predictions,
    parameter_breakdown,
    predict,
    predict_many,
)
from app.services.initializer import parameter_count
from app.services.numerics import corrupt_backward, grad_check, no_grad
from app.services.retrieval import (
    ClassPredictor,
    evaluate_retrieval,
    format_metric_report,
    write_metric_report,
    write_rank_lists,
)
from app.services.training import (
    build_optimizer,
    config_for_dataset,
    evaluate_accuracy,
    evaluation_views,
    format_schedule_csv,
    read_training_log,
    schedule_rows,
    stage2_parameters,
    train_stage1,
    train_stage2,
    write_training_log,
)
from app.utils import constants
from app.utils.config import dump_run_config, load_run_config, settings, with_overrides
from app.utils.context_container import create_run_context
from app.utils.error_handler import ConfigError, InputError, StateError, handle_cli_errors

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


# ===== SHARED OPTIONS =====

def config_options(func):
    """--config, --seed and repeated --set key=value"""
    func = click.option("--set", "settings_", multiple=True, metavar="KEY=VALUE", help="Override one config key.")(func)
    func = click.option("--seed", type=int, default=None, help="Global seed (default: VSFORMER_DEFAULT_SEED).")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Flat key=value config file.")(func)
    return func


def parse_sets(pairs: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got '{pair}'")
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(config_path: Optional[str], seed: Optional[int], pairs: Sequence[str], **extra: Any) -> RunConfig:
    overrides: Dict[str, Any] = {"seed": settings.DEFAULT_SEED}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    overrides.update(parse_sets(pairs))
    if seed is not None:
        overrides["seed"] = seed
    return load_run_config(config_path, overrides)


def open_dataset(cfg: RunConfig, dataset_path: Optional[str], split_path: Optional[str]) -> Tuple[ViewDataset, DatasetSplit]:
    dataset_path = dataset_path or cfg.paths.dataset
    if not dataset_path:
        raise InputError("no dataset given; pass --dataset or set paths.dataset")
    dataset = load_dataset(dataset_path)
    split_path = split_path or cfg.paths.split or str(Path(dataset_path).with_name(constants.SPLIT_FILE))
    if Path(split_path).is_file():
        parts = read_split(split_path, dataset)
    else:
        logger.warning(f"No split file at {split_path}; splitting with ratios {cfg.split_ratios}")
        parts = split(dataset, cfg.split_ratios, cfg.seed)
    return dataset, parts


def output_dir(cfg: RunConfig, out: Optional[str]) -> Path:
    path = Path(out or cfg.paths.output_dir or settings.OUTPUT_ROOT)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.option("--log-level", default=None, help="Override VSFORMER_LOG_LEVEL for this invocation.")
def cli(log_level: Optional[str]):
    """View-set attention model for multi-view 3D shape recognition and retrieval."""
    if log_level:
        level = getattr(logging, log_level.upper(), None)
        if not isinstance(level, int):
            raise click.BadParameter(f"unknown log level '{log_level}'", param_hint="--log-level")
        logging.getLogger().setLevel(level)
        settings.LOG_LEVEL = log_level.upper()


# ===== GEN =====

@cli.command()
@config_options
@click.option("--classes", type=int, default=None, help="Number of classes K.")
@click.option("--subclasses", type=int, default=None, help="Subclasses per class.")
@click.option("--shapes", type=int, default=None, help="Shapes per class.")
@click.option("--views", type=int, default=None, help="Views per shape M.")
@click.option("--mode", type=click.Choice(["feature", "pixel"]), default=None)
@click.option("--feature-dim", type=int, default=None)
@click.option("--image-size", type=int, default=None, help="Square pixel-mode view size.")
@click.option("--margin", type=float, default=None)
@click.option("--noise", type=float, default=None)
@click.option("--ratios", default=None, help="train,val,test fractions, e.g. 0.8,0.1,0.1")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@handle_cli_errors
def gen(config_path, seed, settings_, classes, subclasses, shapes, views, mode, feature_dim, image_size, margin, noise, ratios, out):
    """Generate a synthetic multi-view dataset and its split."""
    ratio_values = None
    if ratios is not None:
        try:
            ratio_values = [float(part) for part in ratios.split(",")]
        except ValueError:
            raise ConfigError(f"--ratios must be three comma-separated numbers, got '{ratios}'")
        if len(ratio_values) != 3 or any(r < 0 for r in ratio_values) or abs(sum(ratio_values) - 1.0) > 1e-9:
            raise ConfigError(f"--ratios must be three nonnegative fractions summing to 1, got '{ratios}'")
    cfg = resolve_config(
        config_path, seed, settings_,
        **{
            "synthetic.num_classes": classes,
            "synthetic.subclasses": subclasses,
            "synthetic.shapes_per_class": shapes,
            "synthetic.views": views,
            "synthetic.mode": mode,
            "synthetic.feature_dim": feature_dim,
            "synthetic.image_height": image_size,
            "synthetic.image_width": image_size,
            "synthetic.margin": margin,
            "synthetic.noise": noise,
            "split_ratios": ratios,
        },
    )
    spec = cfg.synthetic.model_copy(update={"seed": cfg.seed})
    dataset = generate_synthetic(spec)
    parts = split(dataset, ratio_values or cfg.split_ratios, cfg.seed)

    target = output_dir(cfg, out)
    save_dataset(target / constants.DATASET_FILE, dataset)
    write_split(target / constants.SPLIT_FILE, parts)
    click.echo(
        f"Wrote {len(dataset)} shapes ({dataset.num_classes} classes, {dataset.num_sublabels} subclasses) "
        f"to {target / constants.DATASET_FILE}; split {len(parts.train)}/{len(parts.val)}/{len(parts.test)}"
    )


# ===== TRAIN =====

def _restore_initializer(model: VSFormer, path: Path) -> None:
    _, tensors = ckpt.load_checkpoint(path)
    prefix = "init."
    ckpt.restore_module(model.init, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    logger.info(f"Initializer restored from {path}")


@cli.command()
@config_options
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", "split_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory for checkpoints and logs.")
@click.option("--stage", type=click.Choice(["1", "2", "both"]), default="both", show_default=True)
@click.option("--skip-stage1", is_flag=True, help="Train stage 2 from a randomly initialized initializer.")
@click.option("--target", type=click.Choice(["label", "sublabel"]), default=None, help="Train on categories or subcategories.")
@click.option("--epochs", type=int, default=None, help="Stage-2 epochs (schedule.total_epochs).")
@click.option("--resume", is_flag=True, help="Continue an interrupted stage 2 from the run directory.")
@handle_cli_errors
def train(config_path, seed, settings_, dataset_path, split_path, out, stage, skip_stage1, target, epochs, resume):
    """Two-stage training; writes checkpoints and the epoch log CSV."""
    cfg = resolve_config(
        config_path, seed, settings_,
        **{"train.target": target, "schedule.total_epochs": epochs, "stage1.skip": "true" if skip_stage1 else None},
    )
    dataset, parts = open_dataset(cfg, dataset_path, split_path)
    cfg = config_for_dataset(cfg, dataset)
    run_dir = output_dir(cfg, out)
    context = create_run_context(cfg.seed)
    (run_dir / constants.RUN_CONFIG_FILE).write_text(dump_run_config(cfg))

    model = build_model(cfg, dataset.num_targets(cfg.train.target), context)
    stage1_path = run_dir / constants.STAGE1_CHECKPOINT
    model_path = run_dir / constants.MODEL_CHECKPOINT
    log_path = run_dir / constants.TRAIN_LOG

    if stage == "1" and cfg.stage1.skip:
        raise ConfigError("--stage 1 cannot be combined with --skip-stage1")
    resuming = resume and stage != "1" and model_path.is_file()
    if not resuming and stage in ("1", "both") and not cfg.stage1.skip:
        accuracy = train_stage1(model, dataset, parts.train, cfg, context)
        ckpt.save_model(stage1_path, model, stage="1", epoch=0, target=cfg.train.target, stage1_acc=accuracy)
        click.echo(f"stage 1 train accuracy: {accuracy:.4f}")
        if stage == "1":
            return
    elif not resuming and stage == "2" and not cfg.stage1.skip:
        if not stage1_path.is_file():
            raise StateError(f"no stage-1 checkpoint at {stage1_path}; run --stage 1 first or pass --skip-stage1")
        _restore_initializer(model, stage1_path)

    logs = []
    optimizer = None
    start_epoch = 0
    if resuming:
        metadata, tensors = ckpt.load_checkpoint(model_path)
        ckpt.restore_module(model, tensors)
        start_epoch = int(metadata.get("epoch", 0))
        optimizer = build_optimizer(cfg.optimizer, stage2_parameters(model, cfg))
        optimizer.load_state({k[len(ckpt.OPTIMIZER_PREFIX):]: v for k, v in tensors.items() if k.startswith(ckpt.OPTIMIZER_PREFIX)})
        if log_path.is_file():
            logs = [entry for entry in read_training_log(log_path) if entry.epoch < start_epoch]
        logger.info(f"Resuming stage 2 at epoch {start_epoch}")

    def save_progress(entry, opt):
        logs.append(entry)
        write_training_log(log_path, logs)
        ckpt.save_model(model_path, model, opt.state(), stage="2", epoch=entry.epoch + 1, target=cfg.train.target)

    _, optimizer = train_stage2(
        model, dataset, parts.train, parts.val, cfg, context,
        optimizer=optimizer, start_epoch=start_epoch, on_epoch=save_progress,
    )
    ckpt.save_model(model_path, model, optimizer.state(), stage="2", epoch=cfg.schedule.total_epochs, target=cfg.train.target)
    write_training_log(log_path, logs)
    if logs:
        last = logs[-1]
        click.echo(f"final epoch {last.epoch}: train_acc={last.train_acc:.4f} val_inst_acc={last.val_inst_acc}")
    click.echo(f"checkpoint: {model_path}")


# ===== EVAL =====

@cli.command(name="eval")
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", "split_path", type=click.Path(dir_okay=False), default=None)
@click.option("--part", type=click.Choice(list(SPLIT_NAMES)), default="test", show_default=True)
@handle_cli_errors
def evaluate(config_path, seed, settings_, checkpoint_path, dataset_path, split_path, part):
    """Class and instance accuracy of a checkpoint on one split."""
    cfg = resolve_config(config_path, seed, settings_)
    model, metadata, _ = ckpt.load_model(checkpoint_path)
    if not model.trained:
        logger.warning(f"{checkpoint_path} holds an unfinished model")
    dataset, parts = open_dataset(cfg, dataset_path, split_path)
    ids = parts.part(part)
    if not ids:
        raise InputError(f"split '{part}' is empty")
    target = metadata.get("target", "label")
    report = evaluate_accuracy(model, dataset, ids, target, model.cfg.train.num_views, cfg.seed)
    click.echo(f"instance_accuracy={report.instance_accuracy:.6f}")
    click.echo(f"class_accuracy={report.class_accuracy:.6f}")
    click.echo(f"shapes={report.count}")


# ===== PREDICT =====

@cli.command(name="predict")
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", "split_path", type=click.Path(dir_okay=False), default=None)
@click.option("--part", type=click.Choice([*SPLIT_NAMES, "all"]), default="test", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Prediction CSV (stdout when omitted).")
@click.option("--distribution", "distribution_path", type=click.Path(dir_okay=False), default=None, help="Also write every class probability per shape.")
@handle_cli_errors
def predict_shapes(config_path, seed, settings_, checkpoint_path, dataset_path, split_path, part, out, distribution_path):
    """Predicted class and confidence for every shape of one split."""
    cfg = resolve_config(config_path, seed, settings_)
    model, _, _ = ckpt.load_model(checkpoint_path)
    if not model.trained:
        logger.warning(f"{checkpoint_path} holds an unfinished model")
    dataset, parts = open_dataset(cfg, dataset_path, split_path)
    ids = dataset.ids if part == "all" else parts.part(part)
    if not ids:
        raise InputError(f"split '{part}' is empty")
    view_sets = [evaluation_views(dataset, shape_id, model.cfg.train.num_views, cfg.seed) for shape_id in ids]
    results = predict_many(view_sets, model)
    text = format_predictions(ids, results)
    if distribution_path:
        Path(distribution_path).parent.mkdir(parents=True, exist_ok=True)
        Path(distribution_path).write_text(format_distributions(ids, results))
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        click.echo(f"Wrote {len(ids)} predictions to {out}")
    else:
        click.echo(text, nl=False)


# ===== RETRIEVE =====

@cli.command()
@config_options
@click.option("--category", "category_path", type=click.Path(dir_okay=False), required=True, help="Checkpoint trained on labels.")
@click.option("--subcategory", "subcategory_path", type=click.Path(dir_okay=False), default=None, help="Checkpoint trained on sublabels.")
@click.option("--no-subcat", is_flag=True, help="Single-pass retrieval without subcategory re-ranking.")
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", "split_path", type=click.Path(dir_okay=False), default=None)
@click.option("--part", type=click.Choice(list(SPLIT_NAMES)), default="test", show_default=True)
@click.option("--n", "list_length", type=int, default=constants.RANK_LIST_LENGTH, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@handle_cli_errors
def retrieve(config_path, seed, settings_, category_path, subcategory_path, no_subcat, dataset_path, split_path, part, list_length, out):
    """Two-pass retrieval over one split; writes rank lists and the metric CSV."""
    if subcategory_path is None and not no_subcat:
        raise StateError("no subcategory model given; pass --subcategory CKPT or use --no-subcat for single-pass retrieval")
    if list_length < 1:
        raise InputError("--n must be at least 1")
    cfg = resolve_config(config_path, seed, settings_)
    dataset, parts = open_dataset(cfg, dataset_path, split_path)
    ids = parts.part(part)
    if not ids:
        raise InputError(f"split '{part}' is empty")

    category_model, category_meta, _ = ckpt.load_model(category_path)
    if category_meta.get("target", "label") != "label":
        raise ConfigError(f"{category_path} was trained on '{category_meta.get('target')}', expected labels")
    category = ClassPredictor(category_model, dataset, category_model.cfg.train.num_views, cfg.seed)
    subcategory = None
    if not no_subcat:
        sub_model, sub_meta, _ = ckpt.load_model(subcategory_path)
        if sub_meta.get("target") != "sublabel":
            raise ConfigError(f"{subcategory_path} was not trained on sublabels (train --target sublabel)")
        subcategory = ClassPredictor(sub_model, dataset, sub_model.cfg.train.num_views, cfg.seed)

    rank_lists, _, report = evaluate_retrieval(ids, ids, dataset, category, subcategory, list_length)
    target = output_dir(cfg, out)
    write_rank_lists(target / "rank_lists.txt", rank_lists)
    write_metric_report(target / "retrieval_metrics.csv", report)
    click.echo(format_metric_report(report), nl=False)


# ===== ABLATE =====

@cli.command()
@config_options
@click.option("--axis", type=click.Choice(constants.ABLATION_AXES), required=True)
@click.option("--values", default=None, help="Comma-separated variant values (decoder widths join with '-').")
@click.option("--seeds", default=None, help="Comma-separated seeds; each variant is trained once per seed.")
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), default=None)
@click.option("--split", "split_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file (stdout when omitted).")
@handle_cli_errors
def ablate(config_path, seed, settings_, axis, values, seeds, dataset_path, split_path, out):
    """Train and evaluate one variant per value of an ablation axis."""
    cfg = resolve_config(config_path, seed, settings_)
    value_list = [v.strip() for v in values.split(",") if v.strip()] if values else None
    try:
        seed_list = [int(s) for s in seeds.split(",")] if seeds else None
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got '{seeds}'")
    dataset, parts = open_dataset(cfg, dataset_path, split_path)
    rows = run_ablation(cfg, dataset, parts, axis, value_list, seed_list)
    if out:
        write_ablation_csv(out, rows)
    click.echo(format_ablation_csv(rows), nl=False)


# ===== GRADCHECK =====

def tiny_config(views: int, dim: int, heads: int, blocks: int, feature_dim: int, pos_enc: bool, cls_token: bool, seed: int) -> RunConfig:
    return load_run_config(overrides={
        "seed": seed,
        "initializer.kind": "precomputed",
        "initializer.feature_dim": feature_dim,
        "encoder.view_dim": dim,
        "encoder.num_heads": heads,
        "encoder.num_blocks": blocks,
        "encoder.dropout_rate": 0.0,
        "encoder.max_views": max(views, 1),
        "encoder.use_position_encoding": pos_enc,
        "encoder.use_class_token": cls_token,
        "head.decoder_hidden": str(dim),
    })


@cli.command()
@config_options
@click.option("--views", type=int, default=4, show_default=True)
@click.option("--dim", type=int, default=16, show_default=True)
@click.option("--heads", type=int, default=2, show_default=True)
@click.option("--blocks", type=int, default=2, show_default=True)
@click.option("--classes", type=int, default=3, show_default=True)
@click.option("--feature-dim", type=int, default=6, show_default=True)
@click.option("--pos-enc", is_flag=True, help="Include the position-embedding table.")
@click.option("--cls-token", is_flag=True, help="Include the class token.")
@click.option("--step", type=float, default=1e-5, show_default=True, help="Central-difference step.")
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--corrupt-backward", "corrupt_op", default=None, hidden=True)
@handle_cli_errors
def gradcheck(config_path, seed, settings_, views, dim, heads, blocks, classes, feature_dim, pos_enc, cls_token, step, tolerance, corrupt_op):
    """Compare reverse-mode gradients with central differences on a tiny model."""
    if views < 1 or classes < 1:
        raise InputError("--views and --classes must be positive")
    seed = settings.DEFAULT_SEED if seed is None else seed
    cfg = tiny_config(views, dim, heads, blocks, feature_dim, pos_enc, cls_token, seed)
    context = create_run_context(seed)
    model = build_model(cfg, classes, context)
    rng = context.rng("gradcheck")
    inputs = rng.normal(size=(views, feature_dim))
    label = int(rng.integers(classes))

    def closure():
        return model.loss(inputs, label, training=False)[0]

    if corrupt_op:
        with corrupt_backward(corrupt_op):
            error = grad_check(closure, model.parameters(), step)
    else:
        error = grad_check(closure, model.parameters(), step)
    passed = error <= tolerance
    click.echo(f"parameters={model.count_parameters()} max_relative_error={error:.3e} tolerance={tolerance:.1e}")
    click.echo("PASS" if passed else "FAIL")
    if not passed:
        raise click.exceptions.Exit(1)


# ===== INSPECTION =====

@cli.command(name="dump-attention")
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(dir_okay=False), required=True)
@click.option("--shape", "shape_id", required=True, help="Shape id whose view set is encoded.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory for one CSV per block.")
@handle_cli_errors
def dump_attention(config_path, seed, settings_, checkpoint_path, dataset_path, shape_id, out):
    """Write the per-head correlation matrices of one view set, one CSV per block."""
    cfg = resolve_config(config_path, seed, settings_)
    model, _, _ = ckpt.load_model(checkpoint_path)
    dataset = load_dataset(dataset_path)
    views = evaluation_views(dataset, shape_id, model.cfg.train.num_views, cfg.seed)
    sink: List[np.ndarray] = []
    with no_grad():
        model.forward(views, training=False, attention_sink=sink)
    heads = model.cfg.encoder.num_heads
    target = output_dir(cfg, out)
    for block in range(len(sink) // heads):
        lines = ["head,row,col,weight"]
        for head, matrix in enumerate(sink[block * heads:(block + 1) * heads]):
            lines.extend(f"{head},{row},{col},{float(weight)!r}" for (row, col), weight in np.ndenumerate(matrix))
        path = target / constants.ATTENTION_FILE.format(block=block)
        path.write_text("\n".join(lines) + "\n")
        size = sink[block * heads].shape[0]
        click.echo(f"block {block}: {heads} matrices of size {size}x{size} -> {path}")
    if not sink:
        click.echo("model has no attention blocks; nothing written")


@cli.command()
@config_options
@click.option("--step", type=float, default=0.5, show_default=True, help="Epoch spacing of the samples.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file (stdout when omitted).")
@handle_cli_errors
def schedule(config_path, seed, settings_, step, out):
    """Sample the stage-2 learning-rate schedule as CSV."""
    cfg = resolve_config(config_path, seed, settings_)
    text = format_schedule_csv(schedule_rows(cfg.schedule, step))
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        click.echo(f"Wrote schedule to {out}")
    else:
        click.echo(text, nl=False)


@cli.command()
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None)
@click.option("--feature-dim", type=int, default=64, show_default=True, help="Feature width when no checkpoint is given.")
@click.option("--classes", type=int, default=40, show_default=True, help="Classes when no checkpoint is given.")
@click.option("--shapes", type=int, default=16, show_default=True, help="View sets to time.")
@click.option("--views", type=int, default=constants.MAX_VIEWS, show_default=True)
@handle_cli_errors
def benchmark(config_path, seed, settings_, checkpoint_path, feature_dim, classes, shapes, views):
    """Parameter counts and inference throughput."""
    cfg = resolve_config(config_path, seed, settings_)
    if checkpoint_path:
        model, _, _ = ckpt.load_model(checkpoint_path)
    else:
        if cfg.initializer.kind == "precomputed" and cfg.initializer.feature_dim is None:
            cfg = with_overrides(cfg, {"initializer.feature_dim": feature_dim})
        model = build_model(cfg, classes, create_run_context(cfg.seed))
    model.eval()

    for part, count in parameter_breakdown(model).items():
        click.echo(f"parameters.{part}={count}")
    for kind in ("shallow_conv_1", "shallow_conv_2"):
        reference = model.cfg.initializer.model_copy(update={
            "kind": kind,
            "output_dim": constants.VIEW_DIM,
            "view_height": constants.VIEW_SIZE[0],
            "view_width": constants.VIEW_SIZE[1],
            "view_channels": constants.VIEW_SIZE[2],
        })
        click.echo(f"initializer_parameters.{kind}@224x224={parameter_count(reference)}")

    init_cfg = model.cfg.resolved_initializer()
    rng = create_run_context(cfg.seed).rng("data")
    if init_cfg.kind == "precomputed":
        view_sets = [rng.normal(size=(views, init_cfg.feature_dim)) for _ in range(shapes)]
    else:
        geometry = (init_cfg.view_channels, init_cfg.view_height, init_cfg.view_width)
        view_sets = [rng.uniform(size=(views, *geometry)) for _ in range(shapes)]
    predict(view_sets[0], model)
    started = time.perf_counter()
    predict_many(view_sets, model, max_workers=1)
    elapsed = time.perf_counter() - started
    click.echo(f"shapes_per_second={shapes / elapsed:.2f} views={views} shapes={shapes}")


if __name__ == "__main__":
    cli()
