import os
import random

import numpy as np
import torch


def build_loader_kwargs(kwargs_dict=None):
    if not kwargs_dict:
        kwargs_dict = {}
    num_workers = kwargs_dict.get("num_workers") or 0
    if num_workers == -1:
        num_workers = os.cpu_count()
    loader_kwargs = {"num_workers": num_workers}
    # a multiprocessing context is only valid with worker processes
    if num_workers > 0:
        loader_kwargs["multiprocessing_context"] = (
            kwargs_dict.get("multiprocessing_context") or "fork"
        )
    return loader_kwargs


def set_random_seeds(random_seed):
    torch.manual_seed(random_seed)
    np.random.seed(random_seed)
    random.seed(random_seed)


def gradient_norm(parameters):
    grads = [p.grad.detach().flatten() for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())
