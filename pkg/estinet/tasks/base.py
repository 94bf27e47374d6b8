import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Dict, List, Tuple

import numpy as np
import torch

from ..autodiff import label_smoothing_loss
from ..blackbox import BlackBoxDomainError, BlackBoxFunction, adapt_hard, record_bb_pair
from ..data_utils.datasets import BlackBoxDataset, BlackBoxEntry, collate_tensor_dicts

logger = logging.getLogger(__name__)


class LossKind(Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"
    ROWS = "rows"


class Task(ABC):
    """
    One experiment: data generation, the extractor/estimator pair, the black box, and
    the adapters between them. Batches are dicts of tensors keyed by input name.
    """

    name: str
    loss_kind: LossKind
    argument_names: Tuple[str, ...]
    # TrainingConfig fields this task overrides when a config omits them
    training_defaults: Dict[str, Any] = {}

    def __init__(self, blackbox: BlackBoxFunction):
        self.blackbox = blackbox

    @abstractmethod
    def generate(self, split, n, seed, **kwargs) -> List[Any]:
        raise NotImplementedError

    @abstractmethod
    def label_of(self, sample):
        """Re-derives a sample's label from its hidden gold structure through the black box."""
        raise NotImplementedError

    @abstractmethod
    def encode(self, sample) -> Dict[str, torch.Tensor]:
        raise NotImplementedError

    def collate(self, encoded_list):
        return collate_tensor_dicts(encoded_list)

    @abstractmethod
    def build_argument_extractor(self, temperature=1.0):
        raise NotImplementedError

    @abstractmethod
    def build_estimator(self):
        raise NotImplementedError

    @abstractmethod
    def harden(self, arguments, batch) -> List[Tuple]:
        """Black-box argument tuples, one per batch item, from soft argument distributions."""
        raise NotImplementedError

    @abstractmethod
    def gold_arguments(self, batch) -> Dict[str, torch.Tensor]:
        """Ground-truth class index per argument (-1 where an argument does not apply)."""
        raise NotImplementedError

    @abstractmethod
    def sample_offline(self, n, seed) -> BlackBoxDataset:
        raise NotImplementedError

    def sample_to_record(self, sample):
        return sample.to_record()

    def adapt_label(self, value):
        return value

    def label_tensor(self, labels):
        if self.loss_kind == LossKind.REGRESSION:
            return torch.tensor(labels, dtype=torch.float32)
        if self.loss_kind == LossKind.ROWS:
            return torch.stack(
                [torch.as_tensor(np.asarray(rows), dtype=torch.long) for rows in labels]
            )
        return torch.tensor([int(label) for label in labels], dtype=torch.long)

    def replace_blackbox(self, blackbox):
        self.blackbox = blackbox

    def loss(self, output, labels, epsilon=0.0):
        if self.loss_kind == LossKind.REGRESSION:
            return ((output - labels.to(output.dtype)) ** 2).mean()
        return label_smoothing_loss(output, labels, epsilon)

    def predict(self, output):
        if self.loss_kind == LossKind.REGRESSION:
            return output.detach()
        return adapt_hard(output.detach())

    def output_entropy(self, output):
        """Mean entropy of the estimator's output distribution (None for regression)."""
        if self.loss_kind == LossKind.REGRESSION:
            return None
        probabilities = torch.softmax(output.detach(), dim=-1)
        return float(-(probabilities * torch.log(probabilities + 1e-12)).sum(-1).mean())

    def query(self, hard_args):
        """Adapted black-box label for one argument tuple; raises BlackBoxDomainError."""
        __, value = record_bb_pair(self.blackbox, hard_args)
        return self.adapt_label(value)

    def audit(self, samples):
        """Indices of samples whose stored label the black box does not reproduce."""
        mismatches = []
        for i, sample in enumerate(samples):
            try:
                label = self.label_of(sample)
            except BlackBoxDomainError:
                mismatches.append(i)
                continue
            if not np.array_equal(np.asarray(label), np.asarray(sample.label)):
                mismatches.append(i)
        return mismatches

    def _offline_entries(self, arguments_list, context_list, hard_args_list):
        entries = []
        for arguments, context, hard_args in zip(arguments_list, context_list, hard_args_list):
            entries.append(
                BlackBoxEntry(
                    arguments=arguments,
                    context=context,
                    hard_args=hard_args,
                    label=self.query(hard_args),
                    provenance="offline",
                )
            )
        return BlackBoxDataset(entries)


def check_positive(name, value):
    if value <= 0:
        raise ValueError(f"Invalid {name}={value}. Must be > 0")


def dirichlet_distributions(rng, shape, n_classes):
    """Distributions drawn uniformly from the probability simplex."""
    return rng.dirichlet(np.ones(n_classes), size=shape).astype(np.float32)
