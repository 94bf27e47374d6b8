import logging
from dataclasses import asdict, dataclass
from typing import List

import numpy as np
import torch

from ..blackbox import adapt_hard
from ..models import ImageArgumentExtractor
from .base import Task, check_positive, dirichlet_distributions

logger = logging.getLogger(__name__)


@dataclass
class ImageSequenceSample:
    """k MNIST images referenced by index into a split; ``digits`` stay hidden from training."""

    split: str
    image_indices: List[int]
    digits: List[int]
    label: int

    def to_record(self):
        return asdict(self)

    @classmethod
    def from_record(cls, record):
        return cls(**record)


class ImageSequenceTask(Task):
    argument_names = ("digits",)

    def __init__(self, blackbox, mnist_splits, k):
        super().__init__(blackbox)
        check_positive("k", k)
        self.mnist_splits = mnist_splits
        self.k = k

    def _mnist_split(self, split):
        # validation sequences are drawn from the MNIST training images
        mnist_split = "test" if split == "test" else "train"
        try:
            return mnist_split, self.mnist_splits[mnist_split]
        except KeyError:
            raise KeyError(f"MNIST {mnist_split} split was not loaded")

    def generate(self, split, n, seed, k=None):
        check_positive("n", n)
        k = k or self.k
        check_positive("k", k)
        mnist_split, mnist = self._mnist_split(split)
        rng = np.random.default_rng(seed)
        indices = rng.integers(0, len(mnist), size=(n, k))
        samples = []
        for row in indices:
            digits = [int(d) for d in mnist.labels[row]]
            samples.append(
                ImageSequenceSample(
                    split=mnist_split,
                    image_indices=[int(i) for i in row],
                    digits=digits,
                    label=self.label_from_digits(digits),
                )
            )
        logger.info(f"Generated {n} {self.name} samples (split={split}, k={k})")
        return samples

    def label_from_digits(self, digits):
        return self.query(self.hard_args_from_digits(digits))

    def label_of(self, sample):
        return self.label_from_digits(sample.digits)

    def hard_args_from_digits(self, digits):
        raise NotImplementedError

    def encode(self, sample):
        mnist = self.mnist_splits[sample.split]
        return {
            "images": torch.from_numpy(mnist.images[sample.image_indices]),
            "digits": torch.tensor(sample.digits, dtype=torch.long),
            "label": self.label_tensor([sample.label])[0],
        }

    def build_argument_extractor(self, temperature=1.0):
        return ImageArgumentExtractor()

    def harden(self, arguments, batch):
        digits = adapt_hard(arguments["digits"]).tolist()
        return [self.hard_args_from_digits(row) for row in digits]

    def gold_arguments(self, batch):
        return {"digits": batch["digits"]}

    def sample_offline(self, n, seed, k=None):
        check_positive("n", n)
        k = k or self.k
        rng = np.random.default_rng(seed)
        distributions = dirichlet_distributions(rng, (n, k), 10)
        hard_args = [self.hard_args_from_digits(row.argmax(-1).tolist()) for row in distributions]
        return self._offline_entries(
            [{"digits": torch.from_numpy(d)} for d in distributions],
            [{} for __ in range(n)],
            hard_args,
        )
