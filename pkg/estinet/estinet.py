import contextlib
import logging
import math
import tempfile

import pytorch_lightning as pl
import torch
from pytorch_lightning.loggers import TensorBoardLogger

from .autodiff import entropy_term, total_loss
from .blackbox import BlackBoxDomainError
from .config import Mode, Procedure, TrainingConfig
from .data_utils import utils
from .data_utils.datasets import BlackBoxDataset, BlackBoxEntry
from .early_stopping import EarlyStoppingMinEpochs, ModelCheckpointMinEpochs, PretrainStopping
from .evaluation import MetricAccumulator, argument_matches
from .helpers import gradient_norm

logger = logging.getLogger(__name__)

__all__ = ["DivergenceError", "EstiNet", "EstimatorPretrainer"]


class DivergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _check_finite(stage, step, **losses):
    values = {name: float(value) for name, value in losses.items() if value is not None}
    if all(math.isfinite(v) for v in values.values()):
        return
    logger.error(f"{stage} diverged at step={step}: {values}")
    raise DivergenceError(f"{stage} loss is not finite at step={step}", {"step": step, **values})


def _build_trainer_args(min_epochs, max_epochs, callbacks, tb_save_dir, tb_name):
    trainer_args = {
        "min_epochs": min_epochs,
        "max_epochs": max_epochs,
        "callbacks": callbacks,
        "accelerator": "cpu",
        "devices": 1,
        "deterministic": True,
        "enable_progress_bar": False,
        "enable_model_summary": False,
        "logger": False,
    }
    if tb_name and tb_save_dir:
        trainer_args["logger"] = TensorBoardLogger(tb_save_dir, name=tb_name)
    elif tb_name or tb_save_dir:
        raise ValueError(
            'Please provide both "tb_name" and "tb_save_dir" to enable '
            "TensorBoardLogger or omit both to disable it"
        )
    return trainer_args


class EstiNet(pl.LightningModule):
    """
    Argument extractor composed with a black-box estimator, trained with the estimator in
    the loop and run with the real black box in inference mode.

    Each training step applies the target loss (plus the entropy regularizer) to the
    extractor parameters only, and the black-box loss on online-sampled entries to the
    estimator parameters only. The ``end_to_end`` procedure instead updates both from the
    target loss.
    """

    def __init__(self, task, training_config=None):
        super().__init__()
        self.automatic_optimization = False
        self.task = task
        self.training_config = training_config or TrainingConfig()
        self.argument_extractor = task.build_argument_extractor(
            temperature=self.training_config.gumbel_temperature
        )
        self.estimator = task.build_estimator()
        self.mode = Mode.TRAIN
        self.estimator_trainable = True
        self.update_count = 0
        self.skipped_online_count = 0
        self.last_step_stats = {}
        self._valid_accumulator = None

        extractor_ids = {id(p) for p in self.argument_extractor.parameters()}
        if any(id(p) in extractor_ids for p in self.estimator.parameters()):
            raise ValueError("Extractor and estimator must not share parameters")

    @property
    def blackbox(self):
        return self.task.blackbox

    def replace_blackbox(self, blackbox):
        self.task.replace_blackbox(blackbox)

    def set_mode(self, mode):
        self.mode = Mode(mode)
        return self

    def freeze_estimator(self):
        for p in self.estimator.parameters():
            p.requires_grad_(False)
        self.estimator_trainable = False

    def unfreeze_estimator(self):
        for p in self.estimator.parameters():
            p.requires_grad_(True)
        self.estimator_trainable = True

    def forward(self, batch, mode=None, strict=True):
        mode = Mode(mode) if mode else self.mode
        batch = utils.tensor_dict_to_device(batch, device=self.device)
        arguments = self.argument_extractor(batch)
        if mode == Mode.INFERENCE:
            predictions, __ = self.infer(arguments, batch, strict=strict)
            return predictions
        return self.estimator(arguments, batch)

    def infer(self, arguments, batch, strict=True):
        """Label-space black-box outputs for hardened arguments; None marks a domain violation."""
        predictions, violations = [], []
        for i, hard_args in enumerate(self.task.harden(arguments, batch)):
            try:
                predictions.append(self.task.query(hard_args))
            except BlackBoxDomainError:
                if strict:
                    raise
                violations.append(i)
                predictions.append(None)
        return predictions, violations

    def label_online(self, arguments, batch):
        """
        Black-box labels for the extractor's hardened arguments, paired with the detached
        soft arguments and the batch context of the items the black box accepted.
        Returns None when no item was accepted.
        """
        keep, labels = [], []
        for i, hard_args in enumerate(self.task.harden(arguments, batch)):
            try:
                labels.append(self.task.query(hard_args))
            except BlackBoxDomainError:
                continue
            keep.append(i)
        self.last_skipped_count = utils.batch_size_of(batch) - len(keep)
        if not keep:
            return None
        index = torch.tensor(keep, device=self.device)
        detached = {name: p.detach()[index] for name, p in arguments.items()}
        context = utils.subset_batch(batch, keep)
        return detached, context, self.task.label_tensor(labels).to(self.device)

    def sample_online(self, batch, arguments=None):
        """Black-box dataset entries built from the extractor's outputs on ``batch``."""
        batch = utils.tensor_dict_to_device(batch, device=self.device)
        if arguments is None:
            with torch.no_grad():
                arguments = self.argument_extractor(batch)
        entries = []
        for i, hard_args in enumerate(self.task.harden(arguments, batch)):
            try:
                label = self.task.query(hard_args)
            except BlackBoxDomainError:
                self.skipped_online_count += 1
                continue
            entries.append(
                BlackBoxEntry(
                    arguments={name: p[i].detach() for name, p in arguments.items()},
                    context={
                        k: v[i] for k, v in batch.items() if torch.is_tensor(v) and k != "label"
                    },
                    hard_args=hard_args,
                    label=label,
                    provenance="online",
                )
            )
        return BlackBoxDataset(entries)

    def _entropy_term(self, arguments):
        config = self.training_config
        return entropy_term(
            list(arguments.values()), config.entropy_threshold, config.entropy_mode.value
        )

    def training_step(self, batch, batch_idx):
        config = self.training_config
        extractor_optimizer, estimator_optimizer = self.optimizers()

        arguments = self.argument_extractor(batch)
        output = self.estimator(arguments, batch)
        target_loss = self.task.loss(output, batch["label"], config.label_smoothing)
        entropy_loss = self._entropy_term(arguments)
        extractor_loss = total_loss(
            target_loss, 0.0, entropy_loss, beta=config.beta, lam=config.entropy_lambda
        )

        bb_loss = None
        online = config.procedure in (Procedure.ONLINE, Procedure.HYBRID)
        if online and self.estimator_trainable:
            online_batch = self.label_online(arguments, batch)
            if self.last_skipped_count:
                self.skipped_online_count += self.last_skipped_count
                logger.warning(
                    f"Skipped {self.last_skipped_count} online entries outside the "
                    f"black-box domain at update={self.update_count}"
                )
            if online_batch is not None:
                online_arguments, online_context, online_labels = online_batch
                bb_output = self.estimator(online_arguments, online_context)
                bb_loss = self.task.loss(bb_output, online_labels, config.label_smoothing)

        _check_finite(
            "training", self.update_count, target=target_loss, entropy=entropy_loss, bb=bb_loss
        )

        extractor_optimizer.zero_grad()
        estimator_optimizer.zero_grad()
        self.manual_backward(extractor_loss)
        extractor_grad_norm = gradient_norm(self.argument_extractor.parameters())
        if config.procedure == Procedure.END_TO_END:
            extractor_optimizer.step()
            estimator_optimizer.step()
        else:
            extractor_optimizer.step()
            if bb_loss is not None:
                # the target loss gradient on the estimator is discarded
                estimator_optimizer.zero_grad()
                self.manual_backward(config.beta * bb_loss)
                estimator_optimizer.step()
        self.update_count += 1

        self.last_step_stats = {
            "update": self.update_count,
            "target_loss": float(target_loss),
            "entropy": float(entropy_loss),
            "bb_loss": float(bb_loss) if bb_loss is not None else None,
            "extractor_grad_norm": extractor_grad_norm,
            "estimator_entropy": self.task.output_entropy(output),
        }
        log_dict = {
            "train_target_loss": target_loss.detach(),
            "train_entropy": entropy_loss.detach(),
            "extractor_grad_norm": extractor_grad_norm,
        }
        if bb_loss is not None:
            log_dict["train_bb_loss"] = bb_loss.detach()
        self.log_dict(log_dict)
        return extractor_loss.detach()

    @property
    def validation_mode(self):
        if self.training_config.procedure == Procedure.END_TO_END:
            return Mode.TEST
        return Mode.INFERENCE

    def on_validation_epoch_start(self):
        self._valid_accumulator = MetricAccumulator(self.task.loss_kind)

    def validation_step(self, batch, batch_idx):
        arguments = self.argument_extractor(batch)
        labels = batch["label"]
        if self.validation_mode == Mode.INFERENCE:
            predictions, __ = self.infer(arguments, batch, strict=False)
            self._valid_accumulator.add_inference(predictions, labels)
        else:
            self._valid_accumulator.add(self.task.predict(self.estimator(arguments, batch)), labels)
        self._valid_accumulator.add_arguments(
            argument_matches(arguments, self.task.gold_arguments(batch))
        )

    def validation_epoch_end(self, outputs):
        metrics = self._valid_accumulator.result(prefix="valid_")
        self.log_dict({k: float(v) for k, v in metrics.items()})

    def configure_optimizers(self):
        config = self.training_config
        extractor_optimizer = torch.optim.Adam(
            self.argument_extractor.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            eps=config.adam_eps,
        )
        estimator_optimizer = torch.optim.Adam(
            self.estimator.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            eps=config.adam_eps,
        )
        return [extractor_optimizer, estimator_optimizer]

    def fit(
        self,
        datamodule,
        min_epochs=None,
        max_epochs=None,
        early_stop_monitor="valid_accuracy",
        early_stop_min_delta=0.0,
        early_stop_patience=None,
        early_stop_mode="max",
        early_stop_verbose=False,
        model_save_dir=None,
        callbacks=None,
        tb_save_dir=None,
        tb_name=None,
    ):
        config = self.training_config
        min_epochs = min_epochs if min_epochs is not None else config.min_epochs
        max_epochs = max_epochs if max_epochs is not None else config.max_epochs
        early_stop_callback = EarlyStoppingMinEpochs(
            min_epochs=min_epochs,
            monitor=early_stop_monitor,
            min_delta=early_stop_min_delta,
            patience=early_stop_patience or config.early_stop_patience,
            mode=early_stop_mode,
            verbose=early_stop_verbose,
        )
        with contextlib.ExitStack() as stack:
            if model_save_dir is None:
                # checkpoints only live until the best one is loaded back
                model_save_dir = stack.enter_context(tempfile.TemporaryDirectory(prefix="estinet-"))
            checkpoint_callback = ModelCheckpointMinEpochs(
                min_epochs=min_epochs,
                monitor=early_stop_monitor,
                mode=early_stop_mode,
                dirpath=model_save_dir,
            )
            trainer = pl.Trainer(
                **_build_trainer_args(
                    min_epochs,
                    max_epochs,
                    [early_stop_callback, checkpoint_callback, *(callbacks or [])],
                    tb_save_dir,
                    tb_name,
                )
            )
            trainer.fit(self, datamodule)

            best_model_path = checkpoint_callback.best_model_path
            if best_model_path:
                logger.info(f"Loading the best validation model from {best_model_path}...")
                checkpoint = torch.load(best_model_path, map_location=self.device)
                self.load_state_dict(checkpoint["state_dict"])
        return trainer


class EstimatorPretrainer(pl.LightningModule):
    """Trains an estimator alone on a black-box dataset (offline phase)."""

    MONITOR = "pretrain_valid_accuracy"

    def __init__(self, estimator, task, training_config):
        super().__init__()
        self.estimator = estimator
        self.task = task
        self.training_config = training_config
        self._valid_accumulator = None
        self.validated_epochs = 0

    def forward(self, arguments, context):
        return self.estimator(arguments, context)

    def training_step(self, batch, batch_idx):
        output = self.estimator(batch["arguments"], batch["context"])
        loss = self.task.loss(output, batch["label"], self.training_config.label_smoothing)
        _check_finite("pretraining", self.global_step, bb=loss)
        self.log("pretrain_loss", loss)
        return loss

    def on_validation_epoch_start(self):
        self._valid_accumulator = MetricAccumulator(self.task.loss_kind)

    def validation_step(self, batch, batch_idx):
        output = self.estimator(batch["arguments"], batch["context"])
        self._valid_accumulator.add(self.task.predict(output), batch["label"])

    def validation_epoch_end(self, outputs):
        if not self.trainer.sanity_checking:
            self.validated_epochs += 1
        self.log(self.MONITOR, float(self._valid_accumulator.result()["accuracy"]))

    def configure_optimizers(self):
        config = self.training_config
        return torch.optim.Adam(
            self.estimator.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            eps=config.adam_eps,
        )

    def fit(self, datamodule, max_epochs=None, tb_save_dir=None, tb_name=None):
        config = self.training_config
        stopping = PretrainStopping(
            monitor=self.MONITOR,
            threshold=config.pretrain_threshold,
            patience=config.pretrain_patience,
        )
        trainer = pl.Trainer(
            **_build_trainer_args(
                min_epochs=1,
                max_epochs=max_epochs or config.pretrain_max_epochs,
                callbacks=[stopping],
                tb_save_dir=tb_save_dir,
                tb_name=tb_name,
            ),
            enable_checkpointing=False,
        )
        trainer.fit(self, datamodule)
        logger.info(
            f"Estimator pretraining stopped: reason={stopping.stop_reason}, "
            f"best {self.MONITOR}={float(stopping.best_score):.4f}"
        )
        return trainer, stopping
