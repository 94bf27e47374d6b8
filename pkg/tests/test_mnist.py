import gzip
import struct

import numpy as np
import pytest

from estinet.data_utils.mnist import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    IDXFormatError,
    load_mnist,
    load_mnist_idx,
    write_idx,
)


@pytest.fixture
def mnist_dir(tmp_path):
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 5, 5] = 51
    write_idx(tmp_path / "train-images-idx3-ubyte", images, IMAGE_MAGIC)
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([7, 0, 9]), LABEL_MAGIC)
    return tmp_path


def test_load_mnist_idx_scales_pixels(mnist_dir):
    images, labels = load_mnist_idx(
        mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte"
    )

    assert images.dtype == np.float32
    assert images.shape == (3, 28, 28)
    assert images[0, 0, 0] == 1.0
    assert images[1, 5, 5] == pytest.approx(0.2)
    assert labels.dtype == np.int64
    assert labels.tolist() == [7, 0, 9]


def test_load_mnist_reads_gzip_and_limits(tmp_path, mnist_dir):
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        with open(mnist_dir / name, "rb") as src, gzip.open(tmp_path / f"{name}.gz", "wb") as dst:
            dst.write(src.read())
        (mnist_dir / name).unlink()

    split = load_mnist(str(tmp_path), split="train", limit=2)

    assert len(split) == 2
    assert split.labels.tolist() == [7, 0]
    assert split.limit(None) is split


def test_load_mnist_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="ESTINET_DATA_DIR"):
        load_mnist(str(tmp_path), split="test")
    with pytest.raises(ValueError):
        load_mnist(str(tmp_path), split="valid")


def test_bad_magic_number(mnist_dir):
    write_idx(mnist_dir / "train-labels-idx1-ubyte", np.array([7, 0, 9]), IMAGE_MAGIC)

    with pytest.raises(IDXFormatError, match="bad magic number, expected 0x00000801"):
        load_mnist(str(mnist_dir))


def test_truncated_data(mnist_dir):
    path = mnist_dir / "train-images-idx3-ubyte"
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, 3, 28, 28))
        f.write(bytes(100))

    with pytest.raises(IDXFormatError, match="truncated data"):
        load_mnist(str(mnist_dir))


def test_truncated_header(mnist_dir):
    with open(mnist_dir / "train-labels-idx1-ubyte", "wb") as f:
        f.write(b"\x00\x00")

    with pytest.raises(IDXFormatError, match="truncated header"):
        load_mnist(str(mnist_dir))


def test_count_mismatch(mnist_dir):
    write_idx(mnist_dir / "train-labels-idx1-ubyte", np.array([7, 0]), LABEL_MAGIC)

    with pytest.raises(IDXFormatError, match="Count mismatch"):
        load_mnist(str(mnist_dir))


def test_label_out_of_range(mnist_dir):
    write_idx(mnist_dir / "train-labels-idx1-ubyte", np.array([7, 0, 12]), LABEL_MAGIC)

    with pytest.raises(IDXFormatError, match="outside 0-9"):
        load_mnist(str(mnist_dir))
