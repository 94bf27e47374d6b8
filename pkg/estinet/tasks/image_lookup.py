import logging
from dataclasses import replace

from ..blackbox import LookupTable, lookup_blackbox
from ..models import LookupEstimator
from .base import LossKind
from .images import ImageSequenceTask

logger = logging.getLogger(__name__)


class ImageLookupTask(ImageSequenceTask):
    """A k-dimensional digit lookup table T: D^k -> D applied to the digits of k MNIST images."""

    name = "image_lookup"
    loss_kind = LossKind.CLASSIFICATION
    training_defaults = {
        "procedure": "hybrid",
        "beta": 1.0,
        "entropy_lambda": 0.1,
        "entropy_threshold": 0.15,
        "label_smoothing": 0.6,
        "learning_rate": 0.001,
        "batch_size": 20,
    }

    def __init__(self, mnist_splits, k=2, table_seed=0, table=None):
        table = table or LookupTable.random(k, table_seed)
        if table.k != k:
            raise ValueError(f"Invalid table with k={table.k}. Task has k={k}")
        super().__init__(lookup_blackbox(table), mnist_splits, k)
        self.table = table
        self.table_seed = table_seed

    def hard_args_from_digits(self, digits):
        return tuple(int(d) for d in digits)

    def adapt_label(self, value):
        return int(value)

    def build_estimator(self):
        return LookupEstimator(self.k)

    def replace_table(self, table):
        """Swap in another table; the black-box interface stays the same."""
        if table.k != self.k:
            raise ValueError(f"Invalid table with k={table.k}. Task has k={self.k}")
        self.table = table
        self.replace_blackbox(lookup_blackbox(table))
        logger.info(f"Replaced the k={self.k} lookup table")

    def relabel(self, samples):
        """Samples labeled by the current table."""
        return [replace(sample, label=self.label_of(sample)) for sample in samples]
