import logging
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import torch
import torch.nn as nn
from torch.utils.data import Dataset

logger = logging.getLogger(__name__)


def collate_tensor_dicts(dict_list):
    """Stacks per-sample tensors; ragged first dimensions are zero-padded."""
    collated = {}
    for key in dict_list[0].keys():
        values = [d[key] for d in dict_list]
        if not torch.is_tensor(values[0]):
            collated[key] = values
        elif all(v.shape == values[0].shape for v in values):
            collated[key] = torch.stack(values)
        else:
            collated[key] = nn.utils.rnn.pad_sequence(values, batch_first=True)
    return collated


class TaskDataset(Dataset):
    """Task samples encoded lazily to per-sample tensor dicts by ``task.encode``."""

    def __init__(self, task, samples):
        self.task = task
        self.samples = samples

    def __getitem__(self, idx):
        return self.task.encode(self.samples[idx])

    def __len__(self):
        return len(self.samples)

    def collate(self, encoded_list):
        return self.task.collate(encoded_list)


@dataclass
class BlackBoxEntry:
    # estimator input (soft or sampled argument distributions), without a batch dim
    arguments: Dict[str, torch.Tensor]
    # task tensors the estimator reads alongside the arguments (token encodings, cells)
    context: Dict[str, torch.Tensor]
    hard_args: Tuple
    label: Any
    provenance: str = "offline"


@dataclass
class BlackBoxDataset(Dataset):
    entries: List[BlackBoxEntry] = field(default_factory=list)

    def __getitem__(self, idx):
        return self.entries[idx]

    def __len__(self):
        return len(self.entries)

    def extend(self, entries):
        self.entries.extend(entries)

    def provenance_counts(self):
        counts = {}
        for entry in self.entries:
            counts[entry.provenance] = counts.get(entry.provenance, 0) + 1
        return counts

    def split(self, n_valid, random_seed):
        rnd = random.Random(random_seed)
        order = list(range(len(self.entries)))
        rnd.shuffle(order)
        valid = [self.entries[i] for i in order[:n_valid]]
        train = [self.entries[i] for i in order[n_valid:]]
        return BlackBoxDataset(train), BlackBoxDataset(valid)


def verify_labels(dataset, blackbox, label_adapter=None, n=100, random_seed=0):
    """Re-queries the black box on ``n`` random entries; returns the mismatching indices."""
    rnd = random.Random(random_seed)
    indices = rnd.sample(range(len(dataset)), min(n, len(dataset)))
    mismatches = []
    for i in indices:
        entry = dataset[i]
        label = blackbox(*entry.hard_args)
        if label_adapter is not None:
            label = label_adapter(label)
        if not _labels_equal(label, entry.label):
            mismatches.append(i)
    return mismatches


def _labels_equal(a, b):
    if torch.is_tensor(a) or torch.is_tensor(b):
        return bool(torch.equal(torch.as_tensor(a), torch.as_tensor(b)))
    try:
        return bool((a == b).all())
    except AttributeError:
        return a == b
