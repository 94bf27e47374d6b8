import logging

import torch
from more_itertools import chunked
from pytorch_lightning.callbacks import Callback

logger = logging.getLogger(__name__)


def digit_accuracy(classifier, images, labels, batch_size=1000, module=None):
    """
    Fraction of ``images`` whose argmax class under ``classifier`` equals ``labels``.
    ``module`` owns the parameters when ``classifier`` is a bound method.
    """
    module = module if module is not None else classifier
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    was_training = module.training
    module.eval()
    device = next(module.parameters()).device
    correct = 0
    with torch.no_grad():
        for index in chunked(range(len(images)), batch_size):
            logits = classifier(images[index].to(device))
            correct += int((logits.argmax(-1).cpu() == labels[index]).sum())
    module.train(was_training)
    return correct / len(images) if len(images) else 0.0


class ExtractorAccuracyMonitor(Callback):
    """Digit accuracy of the extractor's classifier on held-out MNIST, every ``every`` updates."""

    def __init__(self, images, labels, every=500):
        if every <= 0:
            raise ValueError(f"Invalid every={every}. Must be > 0")
        self.images = torch.as_tensor(images)
        self.labels = torch.as_tensor(labels)
        self.every = every
        self.curve = []

    def measure(self, pl_module):
        accuracy = digit_accuracy(
            pl_module.argument_extractor.digit_classifier, self.images, self.labels
        )
        self.curve.append((pl_module.update_count, accuracy))
        return accuracy

    def on_train_start(self, trainer, pl_module):
        if not self.curve:
            self.measure(pl_module)

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx, *args):
        if pl_module.update_count % self.every == 0:
            accuracy = self.measure(pl_module)
            pl_module.log("extractor_mnist_accuracy", accuracy)
            logger.info(f"update={pl_module.update_count} extractor_mnist_accuracy={accuracy:.4f}")


class TrainingStatsRecorder(Callback):
    """Per-update extractor gradient norm, estimator output entropy and loss terms."""

    def __init__(self):
        self.records = []

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx, *args):
        if pl_module.last_step_stats:
            self.records.append(dict(pl_module.last_step_stats))

    def series(self, key):
        return [r[key] for r in self.records if r.get(key) is not None]

    def tail_median(self, key, fraction=0.25):
        """Median of ``key`` over the last ``fraction`` of recorded updates."""
        values = self.series(key)
        if not values:
            return None
        tail = values[-max(1, int(round(len(values) * fraction))):]
        return float(torch.tensor(tail, dtype=torch.float64).median())


class EpochMetricsRecorder(Callback):
    """Snapshot of the logged metrics after every validation run (sanity checks excluded)."""

    def __init__(self):
        self.epochs = []

    def on_validation_end(self, trainer, pl_module):
        if trainer.sanity_checking:
            return
        metrics = {
            key: float(value) for key, value in trainer.callback_metrics.items()
        }
        self.epochs.append({"epoch": trainer.current_epoch, **metrics})
