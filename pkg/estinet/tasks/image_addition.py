from ..blackbox import SUM
from ..models import SumEstimator
from .base import LossKind
from .images import ImageSequenceTask


class ImageAdditionTask(ImageSequenceTask):
    """Sum of the digits shown by a sequence of MNIST images (trained at k=10, tested at k=100)."""

    name = "image_addition"
    loss_kind = LossKind.REGRESSION
    training_defaults = {
        "procedure": "hybrid",
        "beta": 1.0,
        "entropy_lambda": 0.0,
        "label_smoothing": 0.0,
        "learning_rate": 0.001,
        "batch_size": 50,
    }

    def __init__(self, mnist_splits, k=10, test_k=100, lstm_hidden_size=50, nalu_hidden_size=100):
        super().__init__(SUM, mnist_splits, k)
        self.test_k = test_k
        self.lstm_hidden_size = lstm_hidden_size
        self.nalu_hidden_size = nalu_hidden_size

    def generate(self, split, n, seed, k=None):
        if k is None and split == "test":
            k = self.test_k
        return super().generate(split, n, seed, k=k)

    def hard_args_from_digits(self, digits):
        return (tuple(int(d) for d in digits),)

    def adapt_label(self, value):
        return float(value)

    def build_estimator(self):
        return SumEstimator(self.lstm_hidden_size, self.nalu_hidden_size)
