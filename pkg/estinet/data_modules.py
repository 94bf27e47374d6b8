import logging

import pytorch_lightning as pl
import torch

from .data_utils.datasets import BlackBoxDataset, TaskDataset, collate_tensor_dicts
from .helpers import build_loader_kwargs

logger = logging.getLogger(__name__)

__all__ = ["TaskDataModule", "BlackBoxDataModule"]


class TaskDataModule(pl.LightningDataModule):
    """Train/valid/test loaders over a task's samples, batched with ``task.collate``."""

    def __init__(
        self,
        task,
        train_samples,
        valid_samples,
        test_samples,
        batch_size,
        eval_batch_size,
        train_loader_kwargs=None,
        eval_loader_kwargs=None,
        random_seed=42,
    ):
        super().__init__()
        self.task = task
        self.train_samples = train_samples
        self.valid_samples = valid_samples
        self.test_samples = test_samples
        self.batch_size = batch_size
        self.eval_batch_size = eval_batch_size
        self.train_loader_kwargs = build_loader_kwargs(train_loader_kwargs)
        self.eval_loader_kwargs = build_loader_kwargs(eval_loader_kwargs)
        self.random_seed = random_seed

    def setup(self, stage=None):
        if stage == "fit":
            logger.info("Train sample count: %s", len(self.train_samples))
            logger.info("Valid sample count: %s", len(self.valid_samples))
        elif stage == "test":
            logger.info("Test sample count: %s", len(self.test_samples))

    def train_dataloader(self):
        return torch.utils.data.DataLoader(
            TaskDataset(self.task, self.train_samples),
            batch_size=self.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(self.random_seed),
            collate_fn=self.task.collate,
            **self.train_loader_kwargs,
        )

    def val_dataloader(self):
        return self.dataloader(self.valid_samples)

    def test_dataloader(self):
        return self.dataloader(self.test_samples)

    def dataloader(self, samples, batch_size=None):
        """Unshuffled loader over arbitrary samples of this task, e.g. a relabeled test set."""
        return torch.utils.data.DataLoader(
            TaskDataset(self.task, samples),
            batch_size=batch_size or self.eval_batch_size,
            shuffle=False,
            collate_fn=self.task.collate,
            **self.eval_loader_kwargs,
        )


class BlackBoxBatchCollator:
    def __init__(self, task):
        self.task = task

    def __call__(self, entries):
        return {
            "arguments": collate_tensor_dicts([e.arguments for e in entries]),
            "context": collate_tensor_dicts([e.context for e in entries]),
            "label": self.task.label_tensor([e.label for e in entries]),
        }


class BlackBoxDataModule(pl.LightningDataModule):
    """Loaders over (arguments, black-box label) entries for estimator pretraining."""

    def __init__(
        self,
        task,
        train_dataset: BlackBoxDataset,
        valid_dataset: BlackBoxDataset,
        batch_size,
        eval_batch_size,
        train_loader_kwargs=None,
        eval_loader_kwargs=None,
        random_seed=42,
    ):
        super().__init__()
        if not len(train_dataset):
            raise ValueError("train_dataset is empty")
        self.task = task
        self.train_dataset = train_dataset
        self.valid_dataset = valid_dataset
        self.batch_size = batch_size
        self.eval_batch_size = eval_batch_size
        self.train_loader_kwargs = build_loader_kwargs(train_loader_kwargs)
        self.eval_loader_kwargs = build_loader_kwargs(eval_loader_kwargs)
        self.random_seed = random_seed
        self.collator = BlackBoxBatchCollator(task)

    def setup(self, stage=None):
        if stage == "fit":
            logger.info("Black-box train entry count: %s", len(self.train_dataset))
            logger.info("Black-box valid entry count: %s", len(self.valid_dataset))

    def train_dataloader(self):
        return torch.utils.data.DataLoader(
            self.train_dataset,
            batch_size=self.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(self.random_seed),
            collate_fn=self.collator,
            **self.train_loader_kwargs,
        )

    def val_dataloader(self):
        return self.dataloader(self.valid_dataset)

    def dataloader(self, dataset, batch_size=None):
        return torch.utils.data.DataLoader(
            dataset,
            batch_size=batch_size or self.eval_batch_size,
            shuffle=False,
            collate_fn=self.collator,
            **self.eval_loader_kwargs,
        )
