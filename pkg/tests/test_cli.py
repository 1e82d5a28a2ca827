from pathlib import Path

import pytest
from click.testing import CliRunner

from app.main import cli
from tests.conftest import TINY_OVERRIDES

GOLDEN_SCHEDULE = Path(__file__).parent / "data" / "lr_schedule_golden.csv"


def _tiny_sets():
    args = []
    for key, value in TINY_OVERRIDES.items():
        args += ["--set", f"{key}={value}"]
    return args


def _gen(runner, out, *extra):
    return runner.invoke(cli, [
        "gen", "--seed", "0", "--classes", "3", "--subclasses", "2", "--shapes", "8",
        "--views", "4", "--feature-dim", "6", "--ratios", "0.5,0.25,0.25", "--out", str(out), *extra,
    ])


def _train(runner, data_dir, out, *extra):
    return runner.invoke(cli, [
        "train", "--seed", "0", *_tiny_sets(),
        "--dataset", str(data_dir / "dataset.txt"), "--out", str(out), *extra,
    ])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """Generated dataset plus a category and a subcategory model trained on it"""
    runner = CliRunner()
    root = tmp_path_factory.mktemp("run")
    data_dir = root / "data"
    assert _gen(runner, data_dir).exit_code == 0
    for name, target in (("category", "label"), ("subcategory", "sublabel")):
        result = _train(runner, data_dir, root / name, "--target", target)
        assert result.exit_code == 0, result.output
    return root


# ===== GEN =====

def test_gen_writes_dataset_and_split(tmp_path):
    result = _gen(CliRunner(), tmp_path)
    assert result.exit_code == 0, result.output
    assert "Wrote 24 shapes (3 classes, 6 subclasses)" in result.output
    assert "split 12/6/6" in result.output
    assert (tmp_path / "dataset.txt").is_file()
    assert (tmp_path / "split.txt").read_text().startswith("train:")


def test_gen_rejects_bad_ratios(tmp_path):
    result = CliRunner().invoke(cli, ["gen", "--ratios", "0.5,0.5,0.5", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "--ratios" in result.output
    assert not (tmp_path / "dataset.txt").exists()


# ===== GRADCHECK =====

def test_gradcheck_passes_on_a_tiny_model():
    result = CliRunner().invoke(cli, ["gradcheck", "--seed", "0", "--dim", "8", "--blocks", "1"])
    assert result.exit_code == 0, result.output
    assert result.output.strip().endswith("PASS")
    assert "max_relative_error=" in result.output


def test_gradcheck_with_position_encoding_and_class_token():
    result = CliRunner().invoke(cli, ["gradcheck", "--seed", "1", "--dim", "8", "--blocks", "1", "--pos-enc", "--cls-token"])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output


def test_gradcheck_with_a_small_step():
    result = CliRunner().invoke(cli, ["gradcheck", "--seed", "2", "--dim", "8", "--blocks", "1", "--step", "1e-7"])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output


def test_gradcheck_catches_a_corrupted_backward():
    result = CliRunner().invoke(cli, ["gradcheck", "--seed", "0", "--dim", "8", "--blocks", "1", "--corrupt-backward", "matmul"])
    assert result.exit_code == 1
    assert "FAIL" in result.output


# ===== SCHEDULE =====

def test_schedule_matches_golden_file():
    result = CliRunner().invoke(cli, ["schedule"])
    assert result.exit_code == 0, result.output
    assert result.output == GOLDEN_SCHEDULE.read_text()


def test_schedule_writes_file(tmp_path):
    out = tmp_path / "lr.csv"
    result = CliRunner().invoke(cli, ["schedule", "--out", str(out)])
    assert result.exit_code == 0
    assert out.read_text() == GOLDEN_SCHEDULE.read_text()


# ===== ARGUMENT ERRORS =====

def test_ablate_lists_valid_axes():
    result = CliRunner().invoke(cli, ["ablate", "--axis", "bogus"])
    assert result.exit_code != 0
    assert "blocks" in result.output and "stages" in result.output


def test_retrieve_without_subcategory_model_explains_the_flag():
    result = CliRunner().invoke(cli, ["retrieve", "--category", "missing.ckpt"])
    assert result.exit_code != 0
    assert "--no-subcat" in result.output


def test_unknown_set_key_is_a_config_error(tmp_path):
    result = CliRunner().invoke(cli, ["gen", "--set", "encoder.depth=3", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "encoder.depth" in result.output


# ===== TRAIN / EVAL / RETRIEVE =====

def test_train_writes_run_directory(trained_run):
    run_dir = trained_run / "category"
    for name in ("model.ckpt", "stage1.ckpt", "train_log.csv", "config.txt"):
        assert (run_dir / name).is_file(), name
    rows = (run_dir / "train_log.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,lr,train_loss,train_acc")
    assert len(rows) == 1 + TINY_OVERRIDES["schedule.total_epochs"]


def test_training_is_reproducible(tmp_path, trained_run):
    result = _train(CliRunner(), trained_run / "data", tmp_path, "--target", "label")
    assert result.exit_code == 0, result.output
    original = trained_run / "category"
    for name in ("model.ckpt", "train_log.csv"):
        assert (tmp_path / name).read_bytes() == (original / name).read_bytes()


def test_eval_reports_accuracies(trained_run):
    result = CliRunner().invoke(cli, [
        "eval", "--seed", "0", "--checkpoint", str(trained_run / "category" / "model.ckpt"),
        "--dataset", str(trained_run / "data" / "dataset.txt"),
    ])
    assert result.exit_code == 0, result.output
    lines = dict(line.split("=") for line in result.output.splitlines() if "=" in line)
    assert 0.0 <= float(lines["instance_accuracy"]) <= 1.0
    assert 0.0 <= float(lines["class_accuracy"]) <= 1.0
    assert lines["shapes"] == "6"


def test_eval_on_an_empty_split_fails(tmp_path, trained_run):
    runner = CliRunner()
    assert _gen(runner, tmp_path, "--ratios", "1,0,0").exit_code == 0
    result = runner.invoke(cli, [
        "eval", "--checkpoint", str(trained_run / "category" / "model.ckpt"),
        "--dataset", str(tmp_path / "dataset.txt"),
    ])
    assert result.exit_code == 2
    assert "empty" in result.output


def test_corrupt_checkpoint_names_the_key(tmp_path, trained_run):
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes((trained_run / "category" / "model.ckpt").read_bytes()[:-16])
    result = CliRunner().invoke(cli, [
        "eval", "--checkpoint", str(broken), "--dataset", str(trained_run / "data" / "dataset.txt"),
    ])
    assert result.exit_code == 3
    assert "checkpoint key" in result.output


def test_two_pass_retrieval_writes_rank_lists(tmp_path, trained_run):
    result = CliRunner().invoke(cli, [
        "retrieve", "--seed", "0",
        "--category", str(trained_run / "category" / "model.ckpt"),
        "--subcategory", str(trained_run / "subcategory" / "model.ckpt"),
        "--dataset", str(trained_run / "data" / "dataset.txt"),
        "--n", "5", "--out", str(tmp_path),
    ])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert lines[0] == "average,n,precision,recall,f1,map,ndcg"
    assert lines[1].startswith("micro,5,") and lines[2].startswith("macro,5,")
    rank_lines = (tmp_path / "rank_lists.txt").read_text().splitlines()
    assert len(rank_lines) == 6
    for line in rank_lines:
        query, _, rest = line.partition(":")
        assert query not in rest.split()
        assert len(rest.split()) <= 5


def test_retrieval_refuses_swapped_models(trained_run):
    result = CliRunner().invoke(cli, [
        "retrieve",
        "--category", str(trained_run / "subcategory" / "model.ckpt"),
        "--no-subcat",
        "--dataset", str(trained_run / "data" / "dataset.txt"),
    ])
    assert result.exit_code == 2
    assert "expected labels" in result.output


# ===== INSPECTION =====

def test_dump_attention_writes_one_file_per_block(tmp_path, trained_run):
    result = CliRunner().invoke(cli, [
        "dump-attention", "--checkpoint", str(trained_run / "category" / "model.ckpt"),
        "--dataset", str(trained_run / "data" / "dataset.txt"), "--shape", "s000_0000", "--out", str(tmp_path),
    ])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in tmp_path.iterdir()) == ["attention_block0.csv"]
    lines = (tmp_path / "attention_block0.csv").read_text().splitlines()
    assert lines[0] == "head,row,col,weight"
    # two heads, 4x4 matrices
    assert len(lines) == 1 + 2 * 16
    cells = [line.split(",") for line in lines[1:]]
    assert {cell[0] for cell in cells} == {"0", "1"}
    weights = [float(cell[3]) for cell in cells[:4]]
    assert sum(weights) == pytest.approx(1.0)


def test_dump_attention_per_block_files(tmp_path):
    runner = CliRunner()
    data_dir = tmp_path / "data"
    assert _gen(runner, data_dir).exit_code == 0
    run_dir = tmp_path / "run"
    result = _train(runner, data_dir, run_dir, "--set", "encoder.num_blocks=2", "--set", "stage1.skip=true")
    assert result.exit_code == 0, result.output
    out = tmp_path / "attention"
    result = runner.invoke(cli, [
        "dump-attention", "--checkpoint", str(run_dir / "model.ckpt"),
        "--dataset", str(data_dir / "dataset.txt"), "--shape", "s001_0003", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in out.iterdir()) == ["attention_block0.csv", "attention_block1.csv"]


# ===== PREDICT =====

def test_predict_writes_class_and_confidence(tmp_path, trained_run):
    distribution = tmp_path / "dist.csv"
    result = CliRunner().invoke(cli, [
        "predict", "--seed", "0", "--checkpoint", str(trained_run / "category" / "model.ckpt"),
        "--dataset", str(trained_run / "data" / "dataset.txt"), "--distribution", str(distribution),
    ])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert lines[0] == "shape_id,predicted_class,confidence"
    assert len(lines) == 1 + 6
    dist_lines = distribution.read_text().splitlines()
    assert dist_lines[0] == "shape_id,p0,p1,p2"
    for line, dist_line in zip(lines[1:], dist_lines[1:]):
        shape_id, label, confidence = line.split(",")
        dist_id, *probs = dist_line.split(",")
        probs = [float(p) for p in probs]
        assert dist_id == shape_id
        assert sum(probs) == pytest.approx(1.0)
        assert int(label) == probs.index(max(probs))
        assert float(confidence) == max(probs)


def test_predict_to_file_matches_stdout(tmp_path, trained_run):
    runner = CliRunner()
    args = [
        "predict", "--checkpoint", str(trained_run / "category" / "model.ckpt"),
        "--dataset", str(trained_run / "data" / "dataset.txt"), "--part", "all",
    ]
    printed = runner.invoke(cli, args)
    out = tmp_path / "predictions.csv"
    written = runner.invoke(cli, [*args, "--out", str(out)])
    assert printed.exit_code == 0 and written.exit_code == 0
    assert out.read_text() == printed.output
    assert len(printed.output.splitlines()) == 1 + 24




def test_benchmark_reports_parameters_and_speed():
    result = CliRunner().invoke(cli, ["benchmark", *_tiny_sets(), "--classes", "3", "--shapes", "2", "--views", "3"])
    assert result.exit_code == 0, result.output
    assert "parameters.total=" in result.output
    assert "initializer_parameters.shallow_conv_1@224x224=102770496" in result.output
    assert "initializer_parameters.shallow_conv_2@224x224=12873600" in result.output
    assert "shapes_per_second=" in result.output


@pytest.mark.slow
def test_scaled_run_separates_well_separated_classes(tmp_path):
    runner = CliRunner()
    data_dir = tmp_path / "data"
    result = runner.invoke(cli, [
        "gen", "--seed", "0", "--classes", "4", "--shapes", "20", "--views", "6", "--feature-dim", "16",
        "--margin", "20", "--noise", "0.2", "--ratios", "0.6,0.2,0.2", "--out", str(data_dir),
    ])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, [
        "train", "--seed", "0", "--set", "encoder.view_dim=32", "--set", "encoder.num_heads=4",
        "--set", "encoder.num_blocks=2", "--set", "head.decoder_hidden=32",
        "--set", "stage1.epochs=5", "--set", "schedule.total_epochs=20", "--set", "schedule.interval_epochs=10",
        "--set", "schedule.warmup_epochs=2",
        "--dataset", str(data_dir / "dataset.txt"), "--out", str(tmp_path / "run"),
    ])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, [
        "eval", "--seed", "0", "--checkpoint", str(tmp_path / "run" / "model.ckpt"),
        "--dataset", str(data_dir / "dataset.txt"),
    ])
    assert result.exit_code == 0, result.output
    accuracy = float(result.output.split("instance_accuracy=")[1].split()[0])
    assert accuracy >= 0.9
