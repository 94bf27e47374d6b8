import logging
import os

import torch

from .data_utils.utils import atomic_write

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "estinet-module"
CHECKPOINT_VERSION = 1


def save_module_checkpoint(module, path, kind, training_config=None, extra=None):
    """Versioned container of a module's parameters and the TrainingConfig that produced it."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "state_dict": {k: v.detach().cpu() for k, v in module.state_dict().items()},
        "training_config": training_config.to_dict() if training_config is not None else None,
        "extra": extra or {},
    }
    atomic_write(path, lambda f: torch.save(payload, f), mode="wb")
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def load_module_checkpoint(module, path, kind=None):
    payload = torch.load(path, map_location="cpu")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an estinet module checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"Unsupported checkpoint version={payload['version']}. Expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and payload["kind"] != kind:
        raise ValueError(f"{path} holds a {payload['kind']} checkpoint, expected {kind}")
    module.load_state_dict(payload["state_dict"])
    logger.info(f"Loaded {payload['kind']} checkpoint from {path}")
    return payload


def save_model_checkpoints(model, directory, training_config=None):
    """Extractor and estimator checkpoints side by side; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    return {
        kind: save_module_checkpoint(
            getattr(model, attr), os.path.join(directory, f"{kind}.pt"), kind, training_config
        )
        for kind, attr in (("extractor", "argument_extractor"), ("estimator", "estimator"))
    }


def load_model_checkpoints(model, directory):
    for kind, attr in (("extractor", "argument_extractor"), ("estimator", "estimator")):
        load_module_checkpoint(getattr(model, attr), os.path.join(directory, f"{kind}.pt"), kind)
    return model
