import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import pytorch_lightning as pl
import torch

from .checkpoints import load_module_checkpoint, save_module_checkpoint
from .config import Mode, Procedure
from .data_modules import BlackBoxDataModule
from .data_utils.datasets import verify_labels
from .estinet import EstiNet, EstimatorPretrainer
from .evaluation import MetricAccumulator, evaluate
from .helpers import set_random_seeds

logger = logging.getLogger(__name__)


@dataclass
class PretrainReport:
    stop_reason: str
    valid_accuracy: float
    epochs: int
    train_entries: int
    checkpoint_path: Optional[str] = None


@dataclass
class TrainingResult:
    model: EstiNet
    trainer: Optional[pl.Trainer]
    metrics: Dict[str, Any] = field(default_factory=dict)
    pretrain: Optional[PretrainReport] = None


def _estimator_accuracy(pretrainer, dataloader):
    accumulator = MetricAccumulator(pretrainer.task.loss_kind)
    was_training = pretrainer.training
    pretrainer.eval()
    with torch.no_grad():
        for batch in dataloader:
            output = pretrainer(batch["arguments"], batch["context"])
            accumulator.add(pretrainer.task.predict(output), batch["label"])
    pretrainer.train(was_training)
    return accumulator.result()["accuracy"]


def pretrain_estimator(model, training_config=None, checkpoint_dir=None, label_audit_n=100):
    """
    Trains ``model.estimator`` on an offline black-box dataset until the held-out accuracy
    reaches ``pretrain_threshold`` or plateaus. With ``checkpoint_dir`` the estimator is
    handed off through a saved checkpoint.
    """
    config = training_config or model.training_config
    if config.pretrain_samples <= 0 or config.pretrain_valid_samples <= 0:
        raise ValueError(
            f"Invalid pretrain_samples={config.pretrain_samples}, "
            f"pretrain_valid_samples={config.pretrain_valid_samples}. Both must be > 0"
        )
    task = model.task
    dataset = task.sample_offline(
        config.pretrain_samples + config.pretrain_valid_samples, seed=config.seed
    )
    mismatches = verify_labels(dataset, task.blackbox, task.adapt_label, n=label_audit_n)
    if mismatches:
        raise RuntimeError(f"Black-box dataset labels do not re-query: entries {mismatches[:10]}")
    train_dataset, valid_dataset = dataset.split(config.pretrain_valid_samples, config.seed)
    logger.info(
        f"Offline black-box dataset: train={len(train_dataset)} valid={len(valid_dataset)}"
    )

    datamodule = BlackBoxDataModule(
        task,
        train_dataset,
        valid_dataset,
        batch_size=config.batch_size,
        eval_batch_size=config.eval_batch_size,
        random_seed=config.seed,
    )
    pretrainer = EstimatorPretrainer(model.estimator, task, config)
    __, stopping = pretrainer.fit(datamodule)
    valid_accuracy = _estimator_accuracy(pretrainer, datamodule.val_dataloader())
    logger.info(
        f"Estimator pretraining: stop_reason={stopping.stop_reason} "
        f"valid_accuracy={valid_accuracy:.4f} epochs={pretrainer.validated_epochs}"
    )

    checkpoint_path = None
    if checkpoint_dir:
        checkpoint_path = save_module_checkpoint(
            model.estimator,
            os.path.join(checkpoint_dir, "pretrained_estimator.pt"),
            "estimator",
            config,
            extra={"stop_reason": stopping.stop_reason, "valid_accuracy": valid_accuracy},
        )
        load_module_checkpoint(model.estimator, checkpoint_path, kind="estimator")

    return PretrainReport(
        stop_reason=stopping.stop_reason,
        valid_accuracy=valid_accuracy,
        epochs=pretrainer.validated_epochs,
        train_entries=len(train_dataset),
        checkpoint_path=checkpoint_path,
    )


def _fit(model, datamodule, fit_kwargs):
    trainer = model.fit(datamodule, **fit_kwargs)
    metrics = evaluate(
        model, datamodule.val_dataloader(), model.validation_mode, prefix="valid_"
    )
    return trainer, metrics


def _result(model, trainer, metrics, pretrain=None):
    if pretrain is not None:
        metrics = {
            **metrics,
            "pretrain_stop_reason": pretrain.stop_reason,
            "pretrain_valid_accuracy": pretrain.valid_accuracy,
        }
    metrics["skipped_online_entries"] = model.skipped_online_count
    return TrainingResult(model=model, trainer=trainer, metrics=metrics, pretrain=pretrain)


def _new_model(task, training_config):
    set_random_seeds(training_config.seed)
    pl.seed_everything(training_config.seed, workers=True)
    return EstiNet(task, training_config)


def train_offline(training_config, task, datamodule, checkpoint_dir=None, **fit_kwargs):
    """Pretrains the estimator, freezes it, then trains the extractor on the target loss."""
    model = _new_model(task, training_config)
    if training_config.pretrain_max_epochs == 0:
        raise ValueError("Offline training needs pretrain_max_epochs > 0")
    pretrain = pretrain_estimator(model, training_config, checkpoint_dir=checkpoint_dir)
    model.freeze_estimator()
    trainer, metrics = _fit(model, datamodule, fit_kwargs)
    return _result(model, trainer, metrics, pretrain)


def train_online(training_config, task, datamodule, checkpoint_dir=None, **fit_kwargs):
    model = _new_model(task, training_config)
    trainer, metrics = _fit(model, datamodule, fit_kwargs)
    return _result(model, trainer, metrics)


def train_hybrid(training_config, task, datamodule, checkpoint_dir=None, **fit_kwargs):
    """Offline pretraining followed by online training with the estimator left trainable."""
    model = _new_model(task, training_config)
    pretrain = None
    if training_config.pretrain_max_epochs > 0:
        pretrain = pretrain_estimator(model, training_config, checkpoint_dir=checkpoint_dir)
    trainer, metrics = _fit(model, datamodule, fit_kwargs)
    return _result(model, trainer, metrics, pretrain)


def train_end_to_end(training_config, task, datamodule, checkpoint_dir=None, **fit_kwargs):
    model = _new_model(task, training_config)
    trainer, metrics = _fit(model, datamodule, fit_kwargs)
    return _result(model, trainer, metrics)


PROCEDURES = {
    Procedure.OFFLINE: train_offline,
    Procedure.ONLINE: train_online,
    Procedure.HYBRID: train_hybrid,
    Procedure.END_TO_END: train_end_to_end,
}


def train(training_config, task, datamodule, checkpoint_dir=None, **fit_kwargs):
    procedure = PROCEDURES[training_config.procedure]
    logger.info(f"Training {task.name} with procedure={training_config.procedure.value}")
    result = procedure(
        training_config, task, datamodule, checkpoint_dir=checkpoint_dir, **fit_kwargs
    )
    logger.info(f"Validation metrics: {result.metrics}")
    return result


def evaluate_modes(model, dataloader, modes=(Mode.TEST, Mode.INFERENCE), strict=False, prefix=""):
    metrics = {}
    for mode in modes:
        mode = Mode(mode)
        metrics.update(
            evaluate(model, dataloader, mode, strict=strict, prefix=f"{prefix}{mode.value}_")
        )
    return metrics
