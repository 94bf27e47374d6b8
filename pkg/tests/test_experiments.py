import csv
import json
import os

import mock
import pytest

from estinet.config import ExperimentConfigParser, ModelKind, Procedure
from estinet.data_utils.utils import read_jsonl
from estinet.experiments import (
    SCALE_SETTINGS,
    SCALES,
    TABLE_FIELDS,
    RunRecord,
    build_task,
    generate_data,
    gradcheck_report,
    reproduce_table,
    run_experiment,
    run_once,
    table_cells,
)
from estinet.tasks import ImageAdditionTask, TextLogicTask, TLLTask
from estinet.tasks.tll import TLLSample


def _record(**kwargs):
    kwargs.setdefault("config_hash", "abc")
    kwargs.setdefault("seed", 0)
    kwargs.setdefault("task", "text_logic")
    kwargs.setdefault("model", "estinet")
    kwargs.setdefault("procedure", "online")
    kwargs.setdefault("config", {"task": "text_logic"})
    return RunRecord(**kwargs)


def test_run_record_write_and_load(tmp_path):
    path = str(tmp_path / "run_record.json")
    record = _record(final_metrics={"inference_accuracy": 0.5}, epoch_metrics=[{"epoch": 0}])

    record.write(path)
    loaded = RunRecord.load(path)

    assert loaded == record
    assert loaded.artifacts["run_record"] == path


def test_build_task_needs_no_mnist_for_text_tasks():
    config = ExperimentConfigParser.from_dict({"task": "text_logic"})
    assert isinstance(build_task(config), TextLogicTask)


def test_build_task_uses_given_mnist(mnist_splits):
    config = ExperimentConfigParser.from_dict({"task": "image_addition", "dataset": {"k": 10}})

    task = build_task(config, mnist_splits=mnist_splits)

    assert isinstance(task, ImageAdditionTask)
    assert (task.k, task.test_k) == (10, 100)


@pytest.mark.parametrize("table_id, n_cells", [(1, 10), (2, 4), (3, 15), (4, 12)])
@pytest.mark.parametrize("scale", SCALES)
def test_table_cells_parse_as_experiments(table_id, n_cells, scale):
    cells = table_cells(table_id, scale)

    assert len(cells) == n_cells
    for cell in cells:
        config = ExperimentConfigParser.from_dict(cell.config)
        assert config.training.max_epochs == SCALE_SETTINGS[table_id][scale]["max_epochs"]


def test_table_cells_settings():
    text_logic = table_cells(1)
    baseline = ExperimentConfigParser.from_dict(text_logic[0].config)
    estinet = ExperimentConfigParser.from_dict(text_logic[5].config)

    assert (baseline.model, baseline.training.procedure) == (
        ModelKind.BASELINE,
        Procedure.END_TO_END,
    )
    assert estinet.training.procedure == Procedure.ONLINE
    assert [c.column for c in text_logic[:5]] == ["250", "500", "1000", "5000", "10000"]
    assert text_logic[5].metric == "inference_accuracy"

    tll = {(c.row, c.column): c for c in table_cells(4)}
    hybrid = ExperimentConfigParser.from_dict(tll["Hybrid", "Infer"].config)
    assert hybrid.training.procedure == Procedure.HYBRID
    assert hybrid.evaluation.replace_blackbox
    assert tll["Offline", "Test (training tables)"].published_value is None


def test_table_cells_validation():
    with pytest.raises(ValueError, match="scale"):
        table_cells(1, scale="huge")
    with pytest.raises(ValueError, match="table_id"):
        table_cells(5)


def test_reproduce_table_runs_each_config_once(tmp_path):
    def fake_run(config, **kwargs):
        return [
            _record(
                config_hash=config.config_hash(),
                final_metrics={"k10_test_mae": 1.0, "test_mae": 3.0, "k10_inference_mae": 0.5},
                artifacts={"run_record": f"{config.model.value}.json"},
            )
        ]

    with mock.patch("estinet.experiments.run_experiment", side_effect=fake_run) as run:
        path = reproduce_table(2, scale="desk", out=str(tmp_path))

    assert run.call_count == 2
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    assert tuple(reader.fieldnames) == TABLE_FIELDS
    assert [(r["row"], r["column"], r["value"]) for r in rows] == [
        ("NALU", "k = 10", "1.0000"),
        ("NALU", "k = 100", "3.0000"),
        ("EstiNet", "k = 10", "0.5000"),
        ("EstiNet", "k = 100", ""),
    ]
    assert rows[0]["published_value"] == "1.42"
    assert rows[2]["run_records"] == "estinet.json"
    output_dir = run.call_args_list[0][0][0].output_dir
    assert output_dir == os.path.join(str(tmp_path), "table2-desk")


def test_run_experiment_uses_consecutive_seeds(mnist_splits):
    config = ExperimentConfigParser.from_dict({"task": "image_addition", "repeats": 3})

    with mock.patch(
        "estinet.experiments.load_mnist_splits", return_value=mnist_splits
    ) as load, mock.patch("estinet.experiments.run_once") as run:
        run_experiment(config, seed=7)

    load.assert_called_once()
    assert [c[0][1] for c in run.call_args_list] == [7, 8, 9]
    assert all(c[0][4] is mnist_splits for c in run.call_args_list)


def test_generate_data_is_deterministic(tmp_path):
    first = generate_data("text_logic", 12, 3, str(tmp_path / "a"), audit=True, n_test=5)
    second = generate_data("text_logic", 12, 3, str(tmp_path / "b"), audit=True, n_test=5)

    assert [os.path.basename(p) for p in first] == [
        "text_logic-train-seed3.jsonl",
        "text_logic-test-seed4.jsonl",
    ]
    for a, b in zip(first, second):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()
    assert len(read_jsonl(first[0])) == 12
    assert len(read_jsonl(first[1])) == 5


def test_generate_data_writes_lookup_table(tmp_path, mnist_splits):
    with mock.patch("estinet.experiments.load_mnist_splits", return_value=mnist_splits):
        paths = generate_data("image_lookup", 4, 0, str(tmp_path), k=2)

    assert os.path.basename(paths[-1]) == "lookup_table-k2-seed0.txt"
    with open(paths[-1]) as f:
        lines = [line for line in f if line.strip()]
    assert lines[0].strip() == "2"
    assert len(lines) == 101


def test_generate_data_audit_failure(tmp_path):
    with mock.patch.object(TextLogicTask, "audit", return_value=[1]):
        with pytest.raises(RuntimeError, match="do not match the black box"):
            generate_data("text_logic", 4, 0, str(tmp_path), audit=True)


@pytest.mark.slow
def test_gradcheck_report_passes():
    results = gradcheck_report(trials=1)
    assert results
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@pytest.mark.slow
def test_run_once_text_logic(tmp_path):
    config = ExperimentConfigParser.from_dict(
        {
            "task": "text_logic",
            "training": {"max_epochs": 1, "batch_size": 8, "eval_batch_size": 8},
            "dataset": {"n_train": 16, "n_valid": 8, "n_test": 8},
            "output_dir": str(tmp_path),
        }
    )

    record = run_once(config, seed=5)

    assert record.seed == 5
    assert record.procedure == "online"
    assert record.config["training"]["seed"] == 5
    for key in ("train_accuracy", "test_accuracy", "inference_accuracy"):
        assert key in record.final_metrics
    loaded = RunRecord.load(record.artifacts["run_record"])
    assert (loaded.config_hash, loaded.seed) == (record.config_hash, 5)
    assert set(loaded.final_metrics) == set(record.final_metrics)
    assert os.path.exists(record.artifacts["extractor"])
    assert os.path.exists(record.artifacts["estimator"])
    assert len(read_jsonl(record.artifacts["training_stats"])) == 2


@pytest.mark.slow
def test_run_once_rl(tmp_path, mnist_splits):
    config = ExperimentConfigParser.from_dict(
        {
            "task": "image_addition",
            "model": "rl",
            "rl": {"updates": 2, "eval_every": 1, "eval_images": 10},
            "output_dir": str(tmp_path),
        }
    )

    record = run_once(config, seed=0, mnist_splits=mnist_splits)

    assert record.model == "rl"
    assert set(record.final_metrics) == {"policy_accuracy", "updates_to_0.9"}
    assert len(read_jsonl(record.artifacts["rl_run_log"])) == 3
    with open(record.artifacts["run_record"]) as f:
        assert json.load(f)["model"] == "rl"


def test_rl_needs_image_addition(tmp_path):
    config = ExperimentConfigParser.from_dict(
        {"task": "text_logic", "model": "rl", "output_dir": str(tmp_path)}
    )
    with pytest.raises(ValueError, match="RL baseline"):
        run_once(config, seed=0)


def test_generated_records_load_back_as_samples(tmp_path):
    (path,) = generate_data("tll", 6, 2, str(tmp_path))
    task = TLLTask()

    samples = [TLLSample.from_record(record) for record in read_jsonl(path)]

    assert samples == task.generate("train", 6, 2)
    assert task.audit(samples) == []
