import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from .autodiff import loss_gradcheck_cases, op_gradcheck_cases, run_gradcheck
from .blackbox import LookupTable
from .checkpoints import save_model_checkpoints
from .config import ExperimentConfigParser, Mode, ModelKind
from .data_modules import TaskDataModule
from .data_utils.mnist import load_mnist
from .data_utils.utils import atomic_write, write_jsonl
from .evaluation import evaluate, summarize_runs, updates_to_threshold
from .models import layer_gradcheck_cases
from .monitors import EpochMetricsRecorder, ExtractorAccuracyMonitor, TrainingStatsRecorder
from .rl import accuracy_curve, curve_to_run_log, train_agent
from .tasks import (
    IMAGE_TASKS,
    TASKS,
    ImageAdditionTask,
    ImageLookupTask,
    TextLogicTask,
    TLLTask,
)
from .training import evaluate_modes, train

logger = logging.getLogger(__name__)

SCALES = ("desk", "full")


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    task: str
    model: str
    procedure: str
    config: Dict[str, Any]
    epoch_metrics: List[Dict[str, Any]] = field(default_factory=list)
    final_metrics: Dict[str, Any] = field(default_factory=dict)
    pretrain: Optional[Dict[str, Any]] = None
    wall_clock_seconds: float = 0.0
    artifacts: Dict[str, str] = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    def write(self, path):
        self.artifacts.setdefault("run_record", path)
        atomic_write(path, lambda f: json.dump(self.to_dict(), f, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))


def load_mnist_splits(dataset_config, data_dir=None, download=False):
    return {
        "train": load_mnist(data_dir, "train", download, dataset_config.mnist_train_limit),
        "test": load_mnist(data_dir, "test", download, dataset_config.mnist_test_limit),
    }


def build_task(config, data_dir=None, download=False, mnist_splits=None):
    dataset = config.dataset
    if config.task == TextLogicTask.name:
        return TextLogicTask()
    if config.task == TLLTask.name:
        return TLLTask()
    mnist_splits = mnist_splits or load_mnist_splits(dataset, data_dir, download)
    if config.task == ImageAdditionTask.name:
        return ImageAdditionTask(mnist_splits, k=dataset.k, test_k=dataset.test_k or 100)
    if config.task == ImageLookupTask.name:
        return ImageLookupTask(mnist_splits, k=dataset.k, table_seed=dataset.table_seed)
    raise ValueError(f"Invalid task={config.task}. Expected one of {sorted(TASKS)}")


def build_datamodule(config, task, loader_kwargs=None):
    dataset = config.dataset
    return TaskDataModule(
        task,
        train_samples=task.generate("train", dataset.n_train, dataset.seed),
        valid_samples=task.generate("valid", dataset.n_valid, dataset.seed + 1),
        test_samples=task.generate("test", dataset.n_test, dataset.seed + 2),
        batch_size=config.training.batch_size,
        eval_batch_size=config.training.eval_batch_size,
        train_loader_kwargs=loader_kwargs,
        eval_loader_kwargs=loader_kwargs,
        random_seed=config.training.seed,
    )


def _replacement_table_seed(dataset):
    if dataset.replacement_table_seed is not None:
        return dataset.replacement_table_seed
    return dataset.table_seed + 1


def evaluate_run(model, datamodule, config):
    """
    Train-mode accuracy on (a slice of) the training samples, every configured mode on
    the test samples, plus the task-specific extras: the training sequence length for
    image addition, a replaced lookup table for image lookup, and training-range tables
    for table questions.
    """
    task = model.task
    evaluation = config.evaluation
    modes = [Mode(m) for m in evaluation.modes]
    metrics = evaluate(
        model,
        datamodule.dataloader(datamodule.train_samples[: config.dataset.n_test]),
        Mode.TRAIN,
        with_module_metrics=False,
        prefix="train_",
    )
    metrics.update(
        evaluate_modes(model, datamodule.test_dataloader(), modes, strict=evaluation.strict)
    )

    if isinstance(task, ImageAdditionTask) and task.test_k != task.k:
        samples = task.generate("test", config.dataset.n_test, config.dataset.seed + 3, k=task.k)
        metrics.update(
            evaluate_modes(model, datamodule.dataloader(samples), modes, prefix=f"k{task.k}_")
        )

    if evaluation.replace_blackbox and isinstance(task, ImageLookupTask):
        original_table = task.table
        task.replace_table(LookupTable.random(task.k, _replacement_table_seed(config.dataset)))
        try:
            relabeled = task.relabel(datamodule.test_samples)
            metrics.update(
                evaluate_modes(model, datamodule.dataloader(relabeled), modes, prefix="replaced_")
            )
        finally:
            task.replace_table(original_table)
    elif evaluation.replace_blackbox and isinstance(task, TLLTask):
        # test tables hold held-out values; these use the training value range
        metrics.update(
            evaluate_modes(model, datamodule.val_dataloader(), modes, prefix="train_tables_")
        )
    return metrics


def _run_dir(config):
    return os.path.join(
        config.output_dir, f"{config.task}-{config.model.value}-{config.config_hash()[:12]}"
    )


def _run_rl(config, run_dir, data_dir, download, mnist_splits):
    if config.task != ImageAdditionTask.name:
        raise ValueError(f"Invalid task={config.task} for the RL baseline. Expected image_addition")
    mnist_splits = mnist_splits or load_mnist_splits(config.dataset, data_dir, download)
    log_path = os.path.join(run_dir, "rl_run_log.jsonl")
    __, run_log = train_agent(
        mnist_splits["train"],
        mnist_splits["test"],
        k=config.dataset.k,
        rl_config=config.rl,
        seed=config.training.seed,
        log_path=log_path,
    )
    curve = accuracy_curve(run_log)
    final_metrics = {
        "policy_accuracy": curve[-1][1],
        "updates_to_0.9": updates_to_threshold(curve, 0.9),
    }
    return final_metrics, {"rl_run_log": log_path}, [], None


def _run_estinet(config, run_dir, data_dir, download, mnist_splits):
    task = build_task(config, data_dir, download, mnist_splits)
    datamodule = build_datamodule(config, task)
    stats_recorder = TrainingStatsRecorder()
    epoch_recorder = EpochMetricsRecorder()
    callbacks = [stats_recorder, epoch_recorder]
    accuracy_monitor = None
    if config.task in IMAGE_TASKS:
        mnist_test = task.mnist_splits["test"].limit(config.rl.eval_images)
        accuracy_monitor = ExtractorAccuracyMonitor(
            mnist_test.images, mnist_test.labels, every=config.training.monitor_every
        )
        callbacks.append(accuracy_monitor)

    result = train(
        config.training,
        task,
        datamodule,
        checkpoint_dir=run_dir,
        callbacks=callbacks,
        model_save_dir=os.path.join(run_dir, "lightning"),
    )
    final_metrics = {**result.metrics, **evaluate_run(result.model, datamodule, config)}
    for key in ("extractor_grad_norm", "estimator_entropy"):
        final_metrics[f"{key}_tail_median"] = stats_recorder.tail_median(key)

    artifacts = save_model_checkpoints(
        result.model, os.path.join(run_dir, "checkpoints"), config.training
    )
    artifacts["training_stats"] = os.path.join(run_dir, "training_stats.jsonl")
    write_jsonl(artifacts["training_stats"], stats_recorder.records)
    if accuracy_monitor is not None:
        artifacts["extractor_accuracy"] = os.path.join(run_dir, "extractor_accuracy.jsonl")
        write_jsonl(artifacts["extractor_accuracy"], curve_to_run_log(accuracy_monitor.curve))
        final_metrics["extractor_updates_to_0.9"] = updates_to_threshold(
            accuracy_monitor.curve, 0.9
        )
    pretrain = dataclasses.asdict(result.pretrain) if result.pretrain else None
    return final_metrics, artifacts, epoch_recorder.epochs, pretrain


def run_once(config, seed, data_dir=None, download=False, mnist_splits=None):
    """One seeded run of ``config``; writes checkpoints, logs and the run record."""
    config = config.with_seed(seed)
    run_dir = _run_dir(config)
    os.makedirs(run_dir, exist_ok=True)
    start = time.perf_counter()
    run = _run_rl if config.model == ModelKind.RL else _run_estinet
    final_metrics, artifacts, epoch_metrics, pretrain = run(
        config, run_dir, data_dir, download, mnist_splits
    )
    record = RunRecord(
        config_hash=config.config_hash(),
        seed=seed,
        task=config.task,
        model=config.model.value,
        procedure=config.training.procedure.value,
        config=config.to_dict(),
        epoch_metrics=epoch_metrics,
        final_metrics=final_metrics,
        pretrain=pretrain,
        wall_clock_seconds=time.perf_counter() - start,
        artifacts=artifacts,
    )
    record.write(os.path.join(run_dir, "run_record.json"))
    logger.info(f"Run {record.config_hash[:12]} seed={seed}: {final_metrics}")
    return record


def run_experiment(config, seed=None, data_dir=None, download=False):
    """``config.repeats`` runs with consecutive seeds starting at ``seed`` (or the config's)."""
    base_seed = config.training.seed if seed is None else seed
    mnist_splits = None
    if config.task in IMAGE_TASKS:
        mnist_splits = load_mnist_splits(config.dataset, data_dir, download)
    return [
        run_once(config, base_seed + i, data_dir, download, mnist_splits)
        for i in range(config.repeats)
    ]


def generate_data(
    task_name,
    n,
    seed,
    out,
    split="train",
    audit=False,
    n_test=None,
    k=None,
    data_dir=None,
    download=False,
):
    """Writes generated samples as JSON lines (plus the lookup table for image lookup)."""
    config_dict = {"task": task_name}
    if k is not None:
        config_dict["dataset"] = {"k": k}
    config = ExperimentConfigParser.from_dict(config_dict)
    task = build_task(config, data_dir, download)

    splits = [(split, n, seed)]
    if n_test:
        splits.append(("test", n_test, seed + 1))
    paths = []
    for split_name, split_n, split_seed in splits:
        samples = task.generate(split_name, split_n, split_seed)
        if audit:
            mismatches = task.audit(samples)
            if mismatches:
                raise RuntimeError(
                    f"{len(mismatches)} {task_name} labels do not match the black box: "
                    f"{mismatches[:10]}"
                )
            logger.info(f"Audited {len(samples)} {task_name} {split_name} labels")
        path = os.path.join(out, f"{task_name}-{split_name}-seed{split_seed}.jsonl")
        write_jsonl(path, [task.sample_to_record(s) for s in samples])
        logger.info(f"Wrote {len(samples)} samples to {path}")
        paths.append(path)

    if isinstance(task, ImageLookupTask):
        path = os.path.join(out, f"lookup_table-k{task.k}-seed{task.table_seed}.txt")
        atomic_write(path, task.table.to_text)
        paths.append(path)
    return paths


def gradcheck_report(tolerance=1e-4, seed=0, trials=None):
    cases = op_gradcheck_cases() + loss_gradcheck_cases() + layer_gradcheck_cases()
    return run_gradcheck(cases, tolerance=tolerance, seed=seed, trials=trials)


@dataclass
class TableCell:
    row: str
    column: str
    config: Dict[str, Any]
    metric: str
    published_value: Optional[float] = None


TEXT_LOGIC_SIZES = (250, 500, 1000, 5000, 10000)
PUBLISHED_TEXT_LOGIC = {
    "Baseline": (0.533, 0.686, 0.859, 0.931, 0.98),
    "EstiNet": (0.966, 0.974, 0.968, 0.995, 1.0),
}
PUBLISHED_IMAGE_ADDITION = {"NALU": (1.42, 7.88), "EstiNet": (0.42, 3.3)}
PUBLISHED_IMAGE_LOOKUP = {
    2: (0.98, 0.11, 0.97, 0.99, 0.98),
    3: (0.97, 0.1, 0.97, 0.99, 0.98),
    4: (0.69, 0.1, 0.95, 0.986, 0.7),
}
PUBLISHED_TLL = {
    "offline": (0.09, 0.02, 0.17),
    "online": (0.76, 0.22, 0.69),
    "hybrid": (0.98, 0.47, 0.98),
}

SCALE_SETTINGS = {
    1: {
        "desk": {"max_epochs": 30, "n_valid": 500, "n_test": 1000, "repeats": 1},
        "full": {"max_epochs": 100, "n_valid": 1000, "n_test": 2000, "repeats": 1},
    },
    2: {
        "desk": {
            "max_epochs": 5,
            "n_train": 2000,
            "n_valid": 200,
            "n_test": 200,
            "mnist_train_limit": 10000,
            "pretrain_samples": 5000,
            "repeats": 1,
        },
        "full": {
            "max_epochs": 20,
            "n_train": 20000,
            "n_valid": 1000,
            "n_test": 1000,
            "mnist_train_limit": None,
            "pretrain_samples": 20000,
            "repeats": 1,
        },
    },
    3: {
        "desk": {
            "max_epochs": 5,
            "n_train": 10000,
            "n_valid": 500,
            "n_test": 1000,
            "mnist_train_limit": 10000,
            "pretrain_samples": 5000,
            "repeats": 1,
        },
        "full": {
            "max_epochs": 20,
            "n_train": 50000,
            "n_valid": 2000,
            "n_test": 2000,
            "mnist_train_limit": None,
            "pretrain_samples": 20000,
            "repeats": 1,
        },
    },
    4: {
        "desk": {
            "max_epochs": 10,
            "n_train": 4000,
            "n_valid": 400,
            "n_test": 800,
            "pretrain_samples": 5000,
            "repeats": 3,
        },
        "full": {
            "max_epochs": 30,
            "n_train": 20000,
            "n_valid": 2000,
            "n_test": 4000,
            "pretrain_samples": 20000,
            "repeats": 10,
        },
    },
}


def _experiment_dict(task, model, settings, training=None, dataset=None, evaluation=None):
    dataset_keys = ("n_train", "n_valid", "n_test", "mnist_train_limit")
    return {
        "task": task,
        "model": model,
        "repeats": settings["repeats"],
        "training": {
            "max_epochs": settings["max_epochs"],
            **(
                {"pretrain_samples": settings["pretrain_samples"]}
                if "pretrain_samples" in settings
                else {}
            ),
            **(training or {}),
        },
        "dataset": {**{k: settings[k] for k in dataset_keys if k in settings}, **(dataset or {})},
        "evaluation": evaluation or {"modes": ["test", "inference"]},
    }


def table_cells(table_id, scale="desk"):
    """Every cell of a result table: which experiment produces it and which metric it reads."""
    if scale not in SCALES:
        raise ValueError(f"Invalid scale={scale}. Expected one of {list(SCALES)}")
    if table_id not in SCALE_SETTINGS:
        raise ValueError(f"Invalid table_id={table_id}. Expected one of {sorted(SCALE_SETTINGS)}")
    settings = SCALE_SETTINGS[table_id][scale]
    cells = []
    if table_id == 1:
        for row, model, metric in (
            ("Baseline", "baseline", "test_accuracy"),
            ("EstiNet", "estinet", "inference_accuracy"),
        ):
            training = {"procedure": "online"} if model == "estinet" else {}
            for size, published in zip(TEXT_LOGIC_SIZES, PUBLISHED_TEXT_LOGIC[row]):
                config = _experiment_dict(
                    "text_logic", model, settings, training, dataset={"n_train": size}
                )
                cells.append(TableCell(row, str(size), config, metric, published))
    elif table_id == 2:
        for row, model, mode in (("NALU", "baseline", "test"), ("EstiNet", "estinet", "inference")):
            config = _experiment_dict(
                "image_addition", model, settings, dataset={"k": 10, "test_k": 100}
            )
            published = PUBLISHED_IMAGE_ADDITION[row]
            cells.append(TableCell(row, "k = 10", config, f"k10_{mode}_mae", published[0]))
            cells.append(TableCell(row, "k = 100", config, f"{mode}_mae", published[1]))
    elif table_id == 3:
        columns = (
            ("Train", "train_accuracy"),
            ("Test", "replaced_test_accuracy"),
            ("Inference", "replaced_inference_accuracy"),
            ("Argument Extractor", "test_argument_accuracy"),
            ("Estimator", "test_estimator_accuracy"),
        )
        for k, published in PUBLISHED_IMAGE_LOOKUP.items():
            config = _experiment_dict(
                "image_lookup",
                "estinet",
                settings,
                dataset={"k": k},
                evaluation={"modes": ["test", "inference"], "replace_blackbox": True},
            )
            for (column, metric), value in zip(columns, published):
                cells.append(TableCell(f"k={k}", column, config, metric, value))
    else:
        for procedure, published in PUBLISHED_TLL.items():
            config = _experiment_dict(
                "tll",
                "estinet",
                settings,
                training={"procedure": procedure},
                evaluation={"modes": ["test", "inference"], "replace_blackbox": True},
            )
            row = procedure.capitalize()
            cells.extend(
                [
                    TableCell(row, "Train", config, "train_accuracy", published[0]),
                    TableCell(row, "Test", config, "test_accuracy", published[1]),
                    TableCell(row, "Test (training tables)", config, "train_tables_test_accuracy"),
                    TableCell(row, "Infer", config, "inference_accuracy", published[2]),
                ]
            )
    return cells


TABLE_FIELDS = ("table", "row", "column", "value", "published_value", "config_hash", "run_records")


def reproduce_table(table_id, scale="desk", out=".", data_dir=None, download=False):
    """
    Runs every experiment behind a result table and writes it as CSV, one line per cell:
    this run's value (averaged over repeats) next to the published reference value.
    """
    cells = table_cells(table_id, scale)
    runs = {}
    rows = []
    for cell in cells:
        config = ExperimentConfigParser.from_dict(
            {**cell.config, "output_dir": os.path.join(out, f"table{table_id}-{scale}")}
        )
        config_hash = config.config_hash()
        if config_hash not in runs:
            runs[config_hash] = run_experiment(config, data_dir=data_dir, download=download)
        records = runs[config_hash]
        value = summarize_runs([r.final_metrics for r in records], cell.metric)
        rows.append(
            {
                "table": table_id,
                "row": cell.row,
                "column": cell.column,
                "value": "" if value is None else f"{value:.4f}",
                "published_value": "" if cell.published_value is None else cell.published_value,
                "config_hash": config_hash,
                "run_records": ";".join(r.artifacts.get("run_record", "") for r in records),
            }
        )

    path = os.path.join(out, f"table{table_id}-{scale}.csv")

    def write(f):
        writer = csv.DictWriter(f, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    atomic_write(path, write)
    logger.info(f"Wrote table {table_id} ({scale} scale) to {path}")
    return path


EFFICIENCY_FIELDS = ("model", "updates_to_threshold", "updates_to_best", "threshold")


def write_efficiency_report(report, path):
    def write(f):
        writer = csv.writer(f)
        writer.writerow(EFFICIENCY_FIELDS)
        for model, to_threshold, to_best in report.rows():
            writer.writerow(
                [model, "" if to_threshold is None else to_threshold, to_best, report.threshold]
            )
        writer.writerow([])
        writer.writerow(["update", "estinet_accuracy", "rl_accuracy"])
        for update, a, b in report.aligned:
            writer.writerow([update, "" if a is None else a, "" if b is None else b])

    atomic_write(path, write)
    return path
