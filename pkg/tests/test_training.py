from pathlib import Path

import numpy as np
import pytest

from app.models.schemas import EpochLog, OptimizerConfig, ScheduleConfig
from app.services.checkpoint import restore_module
from app.services.head import build_model
from app.services.numerics import Parameter, backward, no_grad
from app.services.training import (
    SGD,
    AdamW,
    accuracy_report,
    adamw_step,
    build_optimizer,
    config_for_dataset,
    evaluate_accuracy,
    evaluation_views,
    fit,
    format_schedule_csv,
    format_training_log,
    lr_at,
    read_training_log,
    schedule_rows,
    sgd_step,
    stage2_parameters,
    train_stage1,
    train_stage2,
    write_training_log,
)
from app.utils.context_container import RunContext
from app.utils.error_handler import ConfigError, InputError, StateError
from tests.conftest import make_config

GOLDEN_SCHEDULE = Path(__file__).parent / "data" / "lr_schedule_golden.csv"


# ===== SCHEDULE =====

def test_default_schedule_matches_golden_file():
    assert format_schedule_csv(schedule_rows(ScheduleConfig())) == GOLDEN_SCHEDULE.read_text()


@pytest.mark.parametrize(
    "epoch,expected",
    [
        (0, 0.0),
        (2.5, 5e-4),
        (5, 1e-3),
        (52.5, 5e-4),
        (100, 0.0),
        (105, 6e-4),
        (205, 3.6e-4),
        (300, 0.0),
    ],
)
def test_schedule_spot_values(epoch, expected):
    assert lr_at(epoch, ScheduleConfig()) == pytest.approx(expected, abs=1e-15)


def test_schedule_peaks_decay_between_intervals():
    cfg = ScheduleConfig()
    peaks = [lr_at(start + cfg.warmup_epochs, cfg) for start in (0, 100, 200)]
    assert peaks[1] / peaks[0] == pytest.approx(0.6)
    assert peaks[2] / peaks[1] == pytest.approx(0.6)


def test_schedule_rejects_epochs_outside_range():
    with pytest.raises(InputError):
        lr_at(-0.5, ScheduleConfig())
    with pytest.raises(InputError):
        lr_at(300.5, ScheduleConfig())
    with pytest.raises(InputError):
        schedule_rows(ScheduleConfig(), step=0)


def test_schedule_config_needs_warmup_inside_interval():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_epochs=100)
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_epochs=0)


def test_plain_cosine_schedule():
    cfg = ScheduleConfig(kind="cosine", total_epochs=10, warmup_epochs=0)
    assert lr_at(0, cfg) == pytest.approx(1e-3)
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(0.0, abs=1e-18)


# ===== OPTIMIZERS =====

def test_sgd_momentum_unrolled():
    p = Parameter(np.array([1.0]))
    buffers = [None]
    for _ in range(2):
        p.grad = np.array([2.0])
        sgd_step([p], 0.1, 0.9, buffers)
    # buf: 2 then 0.9 * 2 + 2 = 3.8
    assert p.data[0] == pytest.approx(1.0 - 0.2 - 0.38)


def test_adamw_first_step():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    adamw_step([p], 0.1, [np.zeros(1)], [np.zeros(1)], 1, 0.9, 0.999, 1e-8, 0.05)
    # bias-corrected step is g / |g| = 1, plus the decoupled decay 0.05 * p
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 1.05, rel=1e-7)


def test_adam_folds_decay_into_gradient():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    adamw_step([p], 0.1, [np.zeros(1)], [np.zeros(1)], 1, 0.9, 0.999, 1e-8, 0.05, decoupled=False)
    assert p.data[0] == pytest.approx(0.9, rel=1e-7)


def test_adamw_three_step_unroll():
    p = Parameter(np.array([1.0, -2.0]))
    first, second = [np.zeros(2)], [np.zeros(2)]
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.1])]
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.05
    expected, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for step, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1**step), v / (1 - b2**step)
        expected = expected - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * expected)
        p.grad = g
        adamw_step([p], lr, first, second, step, b1, b2, eps, wd)
    assert np.allclose(p.data, expected, rtol=1e-12, atol=1e-14)


def test_adamw_zero_gradient_is_a_no_op_without_decay():
    p = Parameter(np.array([1.5, -0.5]))
    p.grad = np.zeros(2)
    adamw_step([p], 0.1, [np.zeros(2)], [np.zeros(2)], 1, 0.9, 0.999, 1e-8, 0.0)
    assert np.array_equal(p.data, np.array([1.5, -0.5]))


def test_adamw_zero_gradient_applies_the_decay_factor():
    p = Parameter(np.array([1.5, -0.5]))
    p.grad = np.zeros(2)
    adamw_step([p], 0.1, [np.zeros(2)], [np.zeros(2)], 1, 0.9, 0.999, 1e-8, 0.05)
    assert np.allclose(p.data, np.array([1.5, -0.5]) * (1 - 0.1 * 0.05), rtol=1e-15)


def test_optimizer_state_round_trip():
    named = [("w", Parameter(np.ones((2, 2))))]
    optimizer = build_optimizer(OptimizerConfig(), named)
    assert isinstance(optimizer, AdamW)
    named[0][1].grad = np.full((2, 2), 0.3)
    optimizer.step(0.01)
    state = optimizer.state()
    assert set(state) == {"steps", "m.w", "v.w"}

    other = build_optimizer(OptimizerConfig(), [("w", Parameter(np.ones((2, 2))))])
    other.load_state(state)
    assert other.steps == 1
    assert np.array_equal(other.first[0], optimizer.first[0])

    wrong = build_optimizer(OptimizerConfig(), [("w", Parameter(np.ones(3)))])
    with pytest.raises(StateError):
        wrong.load_state(state)


def test_sgd_kind_builds_sgd():
    optimizer = build_optimizer(OptimizerConfig(kind="sgd", momentum=0.5), [("w", Parameter(np.ones(2)))])
    assert isinstance(optimizer, SGD)
    assert optimizer.momentum == 0.5


def test_small_step_lowers_the_loss(tiny_cfg, context, rng):
    model = build_model(tiny_cfg, 3, context)
    views = rng.normal(size=(4, 6))
    model.zero_grad()
    loss, _ = model.loss(views, 2, training=False)
    before = loss.item()
    backward(loss)
    sgd_step(model.parameters(), 1e-6, 0.0, [None] * len(model.parameters()))
    with no_grad():
        after, _ = model.loss(views, 2, training=False)
    assert after.item() < before


# ===== STAGE 1 =====

def test_stage1_trains_only_the_initializer(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(tiny_cfg, small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    before = model.state()
    accuracy = train_stage1(model, small_dataset, small_split.train, cfg, RunContext(0))
    after = model.state()
    assert 0.0 <= accuracy <= 1.0
    assert not np.array_equal(before["init.w"], after["init.w"])
    for key in before:
        if not key.startswith("init."):
            assert np.array_equal(before[key], after[key]), key


def test_stage1_is_deterministic(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(tiny_cfg, small_dataset)
    results = []
    for _ in range(2):
        model = build_model(cfg, small_dataset.num_classes, RunContext(0))
        accuracy = train_stage1(model, small_dataset, small_split.train, cfg, RunContext(0))
        results.append((accuracy, model.state()))
    assert results[0][0] == results[1][0]
    for key, value in results[0][1].items():
        assert np.array_equal(value, results[1][1][key])


def test_stage1_skip_and_empty(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(make_config(**{"stage1.skip": True}), small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    before = model.state()["init.w"]
    assert train_stage1(model, small_dataset, small_split.train, cfg, RunContext(0)) == 0.0
    assert np.array_equal(model.state()["init.w"], before)
    with pytest.raises(InputError):
        train_stage1(model, small_dataset, [], cfg, RunContext(0))


# ===== STAGE 2 =====

def test_stage2_logs_one_row_per_epoch(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(tiny_cfg, small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    seen = []
    logs, optimizer = train_stage2(
        model, small_dataset, small_split.train, small_split.val, cfg, RunContext(0),
        on_epoch=lambda entry, opt: seen.append(entry.epoch),
    )
    assert [entry.epoch for entry in logs] == [0, 1, 2] == seen
    assert [entry.lr for entry in logs] == [lr_at(e, cfg.schedule) for e in range(3)]
    assert all(entry.val_inst_acc is not None for entry in logs)
    assert optimizer.steps == 3 * len(small_split.train)
    assert model.trained and not model.training


def test_stage2_is_deterministic(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(make_config(**{"encoder.dropout_rate": 0.2}), small_dataset)
    runs = []
    for _ in range(2):
        model = build_model(cfg, small_dataset.num_classes, RunContext(7))
        logs, _ = train_stage2(model, small_dataset, small_split.train, [], cfg, RunContext(7))
        runs.append((format_training_log(logs), model.state()))
    assert runs[0][0] == runs[1][0]
    for key, value in runs[0][1].items():
        assert np.array_equal(value, runs[1][1][key])


def test_stage2_resume_reproduces_full_run(small_dataset, small_split):
    cfg = config_for_dataset(
        make_config(**{"encoder.dropout_rate": 0.2, "schedule.total_epochs": 4, "train.batch_size": 2}),
        small_dataset,
    )
    snapshots = {}

    def snapshot(entry, optimizer):
        snapshots[entry.epoch] = (model.state(), optimizer.state())

    model = build_model(cfg, small_dataset.num_classes, RunContext(3))
    full_logs, _ = train_stage2(model, small_dataset, small_split.train, [], cfg, RunContext(3), on_epoch=snapshot)

    weights, optimizer_state = snapshots[1]
    resumed = build_model(cfg, small_dataset.num_classes, RunContext(3))
    restore_module(resumed, weights)
    optimizer = build_optimizer(cfg.optimizer, stage2_parameters(resumed, cfg))
    optimizer.load_state(optimizer_state)
    tail_logs, _ = train_stage2(
        resumed, small_dataset, small_split.train, [], cfg, RunContext(3), optimizer=optimizer, start_epoch=2,
    )
    assert format_training_log(tail_logs) == format_training_log(full_logs[2:])
    final = model.state()
    for key, value in resumed.state().items():
        assert np.array_equal(value, final[key]), key


def test_stage2_rejects_bad_resume_epoch(tiny_cfg, small_dataset, small_split):
    cfg = config_for_dataset(tiny_cfg, small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    with pytest.raises(ConfigError):
        train_stage2(model, small_dataset, small_split.train, [], cfg, RunContext(0), start_epoch=4)


def test_frozen_initializer_is_not_updated(small_dataset, small_split):
    cfg = config_for_dataset(make_config(**{"train.freeze_initializer": True}), small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    before = model.state()
    assert all(not key.startswith("init.") for key, _ in stage2_parameters(model, cfg))
    train_stage2(model, small_dataset, small_split.train, [], cfg, RunContext(0))
    after = model.state()
    assert np.array_equal(before["init.w"], after["init.w"])
    assert not np.array_equal(before["decoder.w1"], after["decoder.w1"])


def test_sublabel_target_sizes_the_head(small_dataset, small_split):
    cfg = make_config(**{"train.target": "sublabel", "stage1.epochs": 0, "schedule.total_epochs": 1})
    model, logs, stage1_acc = fit(cfg, small_dataset, small_split.train, small_split.val, RunContext(0))
    assert model.num_classes == small_dataset.num_sublabels == 6
    assert stage1_acc == 0.0
    assert len(logs) == 1


# ===== EVALUATION =====

def test_accuracy_report_averages_per_class():
    report = accuracy_report([0] * 10, [0] * 9 + [1])
    assert report.instance_accuracy == pytest.approx(0.9)
    assert report.class_accuracy == pytest.approx(0.5)
    assert report.per_class == {0: 1.0, 1: 0.0}
    with pytest.raises(InputError):
        accuracy_report([], [])


def test_evaluation_views_are_fixed_per_shape(small_dataset):
    shape_id = small_dataset.ids[0]
    first = evaluation_views(small_dataset, shape_id, 2, seed=5)
    assert first.shape[0] == 2
    assert np.array_equal(first, evaluation_views(small_dataset, shape_id, 2, seed=5))
    assert evaluation_views(small_dataset, shape_id, None, seed=5) is small_dataset.record(shape_id).views


def test_evaluate_accuracy_rejects_empty_split(tiny_cfg, small_dataset):
    cfg = config_for_dataset(tiny_cfg, small_dataset)
    model = build_model(cfg, small_dataset.num_classes, RunContext(0))
    with pytest.raises(InputError):
        evaluate_accuracy(model, small_dataset, [])


# ===== LOGS =====

def test_training_log_round_trip(tmp_path):
    logs = [
        EpochLog(epoch=0, lr=0.0, train_loss=1.25, train_acc=0.5),
        EpochLog(epoch=1, lr=1e-3, train_loss=0.1 + 0.2, train_acc=0.75, val_class_acc=0.5, val_inst_acc=2 / 3),
    ]
    path = tmp_path / "log.csv"
    write_training_log(path, logs)
    assert path.read_text().splitlines()[0] == "epoch,lr,train_loss,train_acc,val_class_acc,val_inst_acc"
    assert read_training_log(path) == logs


def test_training_log_cells_are_plain_numbers():
    logs = [EpochLog(epoch=0, lr=np.float64(1e-3), train_loss=np.float64(0.5), train_acc=np.float64(0.25), val_inst_acc=np.float64(0.75))]
    text = format_training_log(logs)
    assert "np." not in text
    assert text.splitlines()[1] == "0,0.001,0.5,0.25,,0.75"


def test_config_for_dataset_fills_feature_width(tiny_cfg, small_dataset):
    open_width = tiny_cfg.model_copy(update={"initializer": tiny_cfg.initializer.model_copy(update={"feature_dim": None})})
    cfg = config_for_dataset(open_width, small_dataset)
    assert cfg.initializer.feature_dim == 6
    with pytest.raises(ConfigError):
        config_for_dataset(make_config(**{"initializer.kind": "shallow_conv_1"}), small_dataset)
