import logging
from typing import Dict, List, Optional

import torch
from tqdm.auto import tqdm

from .blackbox import adapt_hard
from .config import Mode
from .data_utils import utils
from .tasks.base import LossKind

logger = logging.getLogger(__name__)

NOT_REACHED = None


def correct_flags(predictions, labels, loss_kind):
    """Per-sample correctness; a table answer is correct only if every row matches."""
    if loss_kind == LossKind.ROWS:
        return (predictions == labels).all(dim=-1)
    if loss_kind == LossKind.REGRESSION:
        return torch.round(predictions) == labels
    return predictions == labels


def accuracy(predictions, labels, loss_kind=LossKind.CLASSIFICATION):
    flags = correct_flags(predictions, labels, loss_kind)
    return float(flags.float().mean()) if flags.numel() else 0.0


def mean_absolute_error(predictions, labels):
    return float((predictions.float() - labels.float()).abs().mean())


def argument_matches(arguments, gold):
    """Per argument name: (correct, counted) over batch items whose gold index is not -1."""
    matches = {}
    for name, gold_index in gold.items():
        predicted = adapt_hard(arguments[name].detach())
        valid = gold_index >= 0
        correct = (predicted == gold_index) & valid
        matches[name] = (int(correct.sum()), int(valid.sum()))
    return matches


def updates_to_threshold(curve, threshold):
    """First update count whose accuracy reaches ``threshold``; NOT_REACHED otherwise."""
    for updates, value in curve:
        if value >= threshold:
            return updates
    return NOT_REACHED


class MetricAccumulator:
    def __init__(self, loss_kind):
        self.loss_kind = loss_kind
        self.n = 0
        self.correct = 0
        self.absolute_error = 0.0
        self.n_regression = 0
        self.domain_violations = 0
        self.argument_counts: Dict[str, List[int]] = {}
        self.estimator_correct = 0
        self.estimator_n = 0

    def add(self, predictions, labels):
        self.n += len(labels)
        self.correct += int(correct_flags(predictions, labels, self.loss_kind).sum())
        if self.loss_kind == LossKind.REGRESSION:
            self.absolute_error += float((predictions.float() - labels.float()).abs().sum())
            self.n_regression += len(labels)

    def add_inference(self, predictions, labels):
        """``predictions`` is a list with None where the black box rejected the arguments."""
        valid = [i for i, p in enumerate(predictions) if p is not None]
        violations = len(predictions) - len(valid)
        self.domain_violations += violations
        self.n += violations
        if valid:
            index = torch.tensor(valid)
            predicted = torch.as_tensor(
                [predictions[i] for i in valid], dtype=labels.dtype, device=labels.device
            )
            self.add(predicted, labels[index.to(labels.device)])

    def add_arguments(self, matches):
        for name, (correct, counted) in matches.items():
            counts = self.argument_counts.setdefault(name, [0, 0])
            counts[0] += correct
            counts[1] += counted

    def add_estimator(self, predictions, labels):
        self.estimator_n += len(labels)
        self.estimator_correct += int(correct_flags(predictions, labels, self.loss_kind).sum())

    def result(self, prefix=""):
        metrics = {"accuracy": self.correct / self.n if self.n else 0.0}
        if self.loss_kind == LossKind.REGRESSION:
            metrics["mae"] = (
                self.absolute_error / self.n_regression if self.n_regression else float("nan")
            )
        if self.argument_counts:
            total_correct = sum(c for c, __ in self.argument_counts.values())
            total = sum(n for __, n in self.argument_counts.values())
            metrics["argument_accuracy"] = total_correct / total if total else 0.0
            for name, (correct, counted) in self.argument_counts.items():
                metrics[f"argument_accuracy_{name}"] = correct / counted if counted else 0.0
        if self.estimator_n:
            metrics["estimator_accuracy"] = self.estimator_correct / self.estimator_n
        metrics["domain_violations"] = self.domain_violations
        return {f"{prefix}{key}": value for key, value in metrics.items()}


def evaluate(
    model,
    dataloader,
    mode,
    strict=False,
    with_module_metrics=True,
    prefix="",
    show_progress=False,
):
    """
    Accuracy (and MAE for regression) of ``model`` in ``mode`` over ``dataloader``, plus
    argument accuracy against gold arguments and estimator accuracy on black-box labels
    for the extractor's own hardened arguments.
    """
    mode = Mode(mode)
    task = model.task
    accumulator = MetricAccumulator(task.loss_kind)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for batch in tqdm(dataloader, desc=f"# {mode.value} batch", disable=not show_progress):
            batch = utils.tensor_dict_to_device(batch, model.device)
            arguments = model.argument_extractor(batch)
            labels = batch["label"]
            if mode == Mode.INFERENCE:
                predictions, __ = model.infer(arguments, batch, strict=strict)
                accumulator.add_inference(predictions, labels)
            else:
                accumulator.add(task.predict(model.estimator(arguments, batch)), labels)

            if with_module_metrics:
                accumulator.add_arguments(argument_matches(arguments, task.gold_arguments(batch)))
                online = model.label_online(arguments, batch)
                if online is not None:
                    online_arguments, online_context, online_labels = online
                    estimator_output = model.estimator(online_arguments, online_context)
                    accumulator.add_estimator(task.predict(estimator_output), online_labels)
    model.train(was_training)

    metrics = accumulator.result(prefix=prefix)
    if metrics.get(f"{prefix}domain_violations"):
        logger.warning(
            f"{metrics[f'{prefix}domain_violations']} black-box domain violations "
            f"in {mode.value} mode"
        )
    return metrics


def summarize_runs(metric_dicts: List[Dict[str, float]], key) -> Optional[float]:
    values = [m[key] for m in metric_dicts if key in m]
    return sum(values) / len(values) if values else None
