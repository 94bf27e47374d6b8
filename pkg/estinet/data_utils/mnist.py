import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from torchvision.datasets import MNIST
from torchvision.datasets.utils import download_and_extract_archive

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    pass


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path, expected_magic, n_dims):
    with _open(path) as f:
        data = f.read()
    header_size = 4 * (1 + n_dims)
    if len(data) < header_size:
        raise IDXFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(
            f"{path}: bad magic number, expected 0x{expected_magic:08X}, found 0x{magic:08X}"
        )
    dims = struct.unpack(f">{n_dims}I", data[4:header_size])
    n_bytes = int(np.prod(dims))
    if len(data) - header_size < n_bytes:
        raise IDXFormatError(
            f"{path}: truncated data, header declares {n_bytes} bytes, "
            f"found {len(data) - header_size}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=n_bytes, offset=header_size).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Images as float32 (n, 28, 28) in [0, 1] and labels as int64 (n,)."""
    images = _read_idx(images_path, IMAGE_MAGIC, n_dims=3)
    labels = _read_idx(labels_path, LABEL_MAGIC, n_dims=1)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"Count mismatch: {images.shape[0]} images in {images_path}, "
            f"{labels.shape[0]} labels in {labels_path}"
        )
    if labels.size and labels.max() > 9:
        raise IDXFormatError(f"{labels_path}: label {labels.max()} outside 0-9")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


@dataclass
class MnistSplit:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def limit(self, n):
        if n is None or n >= len(self):
            return self
        return MnistSplit(images=self.images[:n], labels=self.labels[:n])


def default_data_dir():
    return os.environ.get("ESTINET_DATA_DIR", "./data")


def _find(data_dir, filename):
    for candidate in (filename, filename + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    return None


def download_mnist(data_dir):
    os.makedirs(data_dir, exist_ok=True)
    for filename, md5 in MNIST.resources:
        if _find(data_dir, filename.replace(".gz", "")):
            continue
        for mirror in MNIST.mirrors:
            url = f"{mirror}{filename}"
            try:
                logger.info(f"Downloading {url}")
                download_and_extract_archive(
                    url, download_root=data_dir, filename=filename, md5=md5
                )
                break
            except OSError as err:
                logger.warning(f"Failed to download {url}: {err}")
        else:
            raise RuntimeError(f"Could not download {filename} from any MNIST mirror")


def load_mnist(data_dir=None, split="train", download=False, limit=None):
    if split not in SPLIT_FILES:
        raise ValueError(f"Invalid split={split}. Expected one of {list(SPLIT_FILES)}")
    data_dir = data_dir or default_data_dir()
    images_name, labels_name = SPLIT_FILES[split]
    images_path, labels_path = _find(data_dir, images_name), _find(data_dir, labels_name)
    if images_path is None or labels_path is None:
        if not download:
            raise FileNotFoundError(
                f"MNIST {split} files not found in {data_dir}. "
                "Set ESTINET_DATA_DIR or pass download=True"
            )
        download_mnist(data_dir)
        images_path, labels_path = _find(data_dir, images_name), _find(data_dir, labels_name)

    images, labels = load_mnist_idx(images_path, labels_path)
    logger.info(f"Loaded {len(labels)} MNIST {split} images from {data_dir}")
    return MnistSplit(images=images, labels=labels).limit(limit)


def write_idx(path, array, magic):
    """Writes a uint8 array in IDX format (used to build fixtures and subsets)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())
