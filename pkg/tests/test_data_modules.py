import pytest
import torch

from estinet.data_modules import BlackBoxDataModule, TaskDataModule
from estinet.data_utils.datasets import BlackBoxDataset


def test_task_datamodule_batches(text_logic_task, text_logic_datamodule):
    train_batches = list(text_logic_datamodule.train_dataloader())
    test_batches = list(text_logic_datamodule.test_dataloader())

    assert [len(b["label"]) for b in train_batches] == [8, 8]
    assert [len(b["label"]) for b in test_batches] == [8]
    assert set(train_batches[0]) >= {"piece_ids", "lengths", "label"}


def test_task_datamodule_train_order_is_seeded(text_logic_task):
    samples = text_logic_task.generate("train", 16, seed=0)

    def first_piece_ids(random_seed):
        datamodule = TaskDataModule(
            text_logic_task, samples, samples, samples, 4, 4, random_seed=random_seed
        )
        return next(iter(datamodule.train_dataloader()))["piece_ids"]

    assert torch.equal(first_piece_ids(1), first_piece_ids(1))


def test_blackbox_datamodule_collates_entries(text_logic_task):
    dataset = text_logic_task.sample_offline(10, seed=0)
    train, valid = dataset.split(n_valid=4, random_seed=0)

    datamodule = BlackBoxDataModule(text_logic_task, train, valid, batch_size=3, eval_batch_size=4)
    batch = next(iter(datamodule.val_dataloader()))

    assert set(batch) == {"arguments", "context", "label"}
    assert batch["label"].dtype == torch.long
    assert len(batch["label"]) == 4
    assert batch["context"]["number_vectors"].shape[:2] == (4, 2)
    assert len(list(datamodule.train_dataloader())) == 2


def test_blackbox_datamodule_needs_entries(text_logic_task):
    with pytest.raises(ValueError, match="empty"):
        BlackBoxDataModule(text_logic_task, BlackBoxDataset([]), BlackBoxDataset([]), 4, 4)
