import json
import logging
import os
import tempfile

import torch

logger = logging.getLogger(__name__)


def tensor_dict_to_device(tensor_dict, device):
    return {
        key: value.to(device) if torch.is_tensor(value) else value
        for key, value in tensor_dict.items()
    }


def subset_batch(batch, index):
    """Rows ``index`` of every batch entry; tensors are indexed, lists are gathered."""
    index = torch.as_tensor(index, dtype=torch.long)
    subset = {}
    for key, value in batch.items():
        if torch.is_tensor(value):
            subset[key] = value[index.to(value.device)]
        else:
            subset[key] = [value[i] for i in index.tolist()]
    return subset


def batch_size_of(batch):
    for value in batch.values():
        return len(value)
    return 0


def atomic_write(path, write_fn, mode="w"):
    """Calls ``write_fn(file_obj)`` on a temp file in the target dir, then renames over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8") as f:
            write_fn(f)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_jsonl(path, records):
    def write(f):
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    atomic_write(path, write)


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
