import logging

from pytorch_lightning.callbacks import ModelCheckpoint
from pytorch_lightning.callbacks.early_stopping import EarlyStopping

logger = logging.getLogger(__name__)


class EarlyStoppingMinEpochs(EarlyStopping):
    def __init__(
        self,
        min_epochs,
        monitor,
        patience,
        mode,
        min_delta=0.0,
        verbose=False,
        strict=True,
    ):
        super().__init__(
            monitor=monitor,
            patience=patience,
            mode=mode,
            min_delta=min_delta,
            verbose=verbose,
            strict=strict,
            check_on_train_epoch_end=False,
        )
        self.min_epochs = min_epochs

    def on_validation_end(self, trainer, pl_module):
        if trainer.current_epoch < self.min_epochs - 1:
            return
        super().on_validation_end(trainer, pl_module)


class PretrainStopping(EarlyStopping):
    """
    Stops estimator pretraining once validation accuracy reaches ``threshold`` or stops
    improving for ``patience`` epochs, and records which rule fired in ``stop_reason``.
    """

    THRESHOLD = "threshold"
    PLATEAU = "plateau"
    MAX_EPOCHS = "max_epochs"

    def __init__(self, monitor, threshold=0.9, patience=5, verbose=False):
        super().__init__(
            monitor=monitor,
            patience=patience,
            mode="max",
            stopping_threshold=threshold,
            verbose=verbose,
            check_on_train_epoch_end=False,
        )
        self.threshold = threshold
        self.stop_reason = self.MAX_EPOCHS

    def on_validation_end(self, trainer, pl_module):
        super().on_validation_end(trainer, pl_module)
        if not trainer.should_stop:
            return
        if self.best_score is not None and float(self.best_score) >= self.threshold:
            self.stop_reason = self.THRESHOLD
        else:
            self.stop_reason = self.PLATEAU


class ModelCheckpointMinEpochs(ModelCheckpoint):
    def __init__(
        self,
        min_epochs,
        monitor,
        mode,
        dirpath=None,
        filename=None,
        verbose=False,
        save_top_k=1,
    ):
        super().__init__(
            dirpath=dirpath,
            filename=filename,
            monitor=monitor,
            verbose=verbose,
            save_top_k=save_top_k,
            mode=mode,
            save_on_train_epoch_end=False,
        )
        self.min_epochs = min_epochs

    def on_validation_end(self, trainer, pl_module):
        if trainer.current_epoch < self.min_epochs - 1:
            return
        super().on_validation_end(trainer, pl_module)
