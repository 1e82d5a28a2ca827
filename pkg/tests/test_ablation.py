
import numpy as np
import pytest

from app.services.ablation import (
    ABLATION_COLUMNS,
    DEFAULT_VALUES,
    AblationRow,
    format_ablation_csv,
    run_ablation,
    variant_overrides,
    write_ablation_csv,
)
from app.utils import constants
from app.utils.config import with_overrides
from app.utils.error_handler import ConfigError


def test_every_axis_has_defaults():
    assert set(DEFAULT_VALUES) == set(constants.ABLATION_AXES)


def test_variant_overrides():
    assert variant_overrides("blocks", "2") == {"encoder.num_blocks": "2"}
    assert variant_overrides("pos-enc", "on") == {"encoder.use_position_encoding": "true"}
    assert variant_overrides("cls-token", "off") == {"encoder.use_class_token": "false"}
    assert variant_overrides("decoder", "1024-512") == {"head.decoder_hidden": "1024,512"}
    assert variant_overrides("decoder", "none") == {"head.decoder_hidden": ""}
    assert variant_overrides("stages", "1-stage") == {"stage1.skip": "true"}


def test_bad_axes_and_values():
    with pytest.raises(ConfigError, match="valid axes"):
        variant_overrides("depth", "2")
    with pytest.raises(ConfigError):
        variant_overrides("pos-enc", "maybe")
    with pytest.raises(ConfigError):
        variant_overrides("stages", "3-stage")


def test_default_values_build_valid_configs(tiny_cfg):
    for axis, values in DEFAULT_VALUES.items():
        for value in values:
            with_overrides(tiny_cfg, variant_overrides(axis, value))


def test_invalid_value_fails_before_training(tiny_cfg, small_dataset, small_split):
    # three heads do not divide view_dim 8
    with pytest.raises(ConfigError):
        run_ablation(tiny_cfg, small_dataset, small_split, "heads", ["1", "3"])


def test_blocks_ablation_rows(tiny_cfg, small_dataset, small_split, tmp_path):
    rows = run_ablation(tiny_cfg, small_dataset, small_split, "blocks", ["0", "1"], seeds=[0, 1])
    assert [(row.value, row.seed) for row in rows] == [("0", 0), ("1", 0), ("0", 1), ("1", 1)]
    assert rows[0].parameters < rows[1].parameters
    assert rows[0].parameters == rows[2].parameters
    for row in rows:
        assert 0.0 <= row.instance_accuracy <= 1.0
        assert 0.0 <= row.class_accuracy <= 1.0

    again = run_ablation(tiny_cfg, small_dataset, small_split, "blocks", ["1"], seeds=[0])
    assert again[0] == rows[1]

    text = format_ablation_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(ABLATION_COLUMNS)
    assert lines[1].startswith("blocks,0,0,")
    path = tmp_path / "ablation.csv"
    write_ablation_csv(path, rows)
    assert path.read_text() == text


def test_incompatible_variants_fail_before_training(tiny_cfg, small_dataset, small_split, monkeypatch):
    def no_training(*args, **kwargs):
        raise AssertionError("a variant was trained")

    monkeypatch.setattr("app.services.ablation.fit", no_training)
    with pytest.raises(ConfigError, match="image views"):
        run_ablation(tiny_cfg, small_dataset, small_split, "initializer", ["shallow_conv_1"])
    with pytest.raises(ConfigError, match="views"):
        run_ablation(tiny_cfg, small_dataset, small_split, "views", ["2", "5"])


def test_csv_cells_are_plain_numbers():
    row = AblationRow(
        axis="blocks", value="1", seed=0, parameters=10,
        stage1_acc=np.float64(0.5), instance_accuracy=np.float64(0.25), class_accuracy=np.float64(1 / 3),
    )
    line = format_ablation_csv([row]).splitlines()[1]
    assert "np." not in line
    assert [float(cell) for cell in line.split(",")[4:]] == [0.5, 0.25, 1 / 3]
