import numpy as np
import pytest

from estinet.data_modules import TaskDataModule
from estinet.data_utils.mnist import MnistSplit
from estinet.tasks import TextLogicTask


def fake_mnist_split(n, seed):
    """Random-pixel images; each label is also written into the first pixel row."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    images = rng.random((n, 28, 28)).astype(np.float32) * 0.1
    images[np.arange(n), 0, labels] = 1.0
    return MnistSplit(images=images, labels=labels)


@pytest.fixture
def mnist_splits():
    return {"train": fake_mnist_split(200, seed=1), "test": fake_mnist_split(100, seed=2)}


@pytest.fixture
def text_logic_task():
    return TextLogicTask()


@pytest.fixture
def text_logic_datamodule(text_logic_task):
    return TaskDataModule(
        text_logic_task,
        train_samples=text_logic_task.generate("train", 16, seed=0),
        valid_samples=text_logic_task.generate("valid", 8, seed=1),
        test_samples=text_logic_task.generate("test", 8, seed=2),
        batch_size=8,
        eval_batch_size=8,
    )
