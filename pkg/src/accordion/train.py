"""Accordion training loop, the conventional baseline, and evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .arch import AccordionModel, DepthConfig, forward, loss_and_grad
from .data import Dataset
from .errors import ConfigError, InputError
from .nncore import make_rng, sgd_step
from .policy import DepthPolicy, sample


@dataclass(frozen=True)
class TrainConfig:
    policy: DepthPolicy
    epochs: int = 60
    batch_size: int = 124
    learning_rate: float = 0.01
    lr_schedule: tuple[tuple[int, float], ...] = ((30, 10.0), (45, 10.0))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "lr_schedule", tuple((int(e), float(d)) for e, d in self.lr_schedule)
        )
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be nonnegative")
        marks = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ConfigError("lr schedule epochs must be strictly increasing")
        if any(d <= 0 for _, d in self.lr_schedule):
            raise ConfigError("lr divisors must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during 0-based ``epoch``."""
        lr = self.learning_rate
        for start, divisor in self.lr_schedule:
            if epoch >= start:
                lr /= divisor
        return lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    full_error: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    iterations: int = 0
    unit_backward_passes: int = 0
    digest: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "full_error", "lr"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.loss), repr(r.full_error), repr(r.lr)])


def accordion_step(
    model: AccordionModel,
    batch: np.ndarray,
    labels: np.ndarray,
    config: DepthConfig,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> float:
    """One SGD step through the units of ``config`` only.

    Parameters (and momentum buffers) of inactive units are left untouched.
    """
    loss, touched = loss_and_grad(model, config, batch, labels)
    sgd_step(model.params, lr, momentum, weight_decay, keys=touched)
    return loss


def iterations_per_epoch(num_samples: int, batch_size: int) -> int:
    return math.ceil(num_samples / batch_size)


def train(
    model: AccordionModel,
    dataset: Dataset,
    cfg: TrainConfig,
    validation: Dataset | None = None,
) -> TrainReport:
    """Train in place; one sampled depth configuration per mini-batch."""
    if len(dataset) == 0:
        raise InputError("training set is empty")
    if cfg.policy.total_units != model.spec.total_units:
        raise ConfigError("policy and model disagree on the number of units")
    report = TrainReport()
    policy_rng = make_rng(cfg.seed, "policy")
    full = DepthConfig.full(model.spec, cfg.policy.scheme)
    n = len(dataset)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            config = sample(cfg.policy, policy_rng)
            losses.append(
                accordion_step(
                    model, dataset.x[idx], dataset.y[idx], config, lr,
                    cfg.momentum, cfg.weight_decay,
                )
            )
            report.iterations += 1
            report.unit_backward_passes += config.kept_units
        err = evaluate(model, full, validation) if validation is not None else float("nan")
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), err, lr))
    report.wall_time = time.perf_counter() - t0
    report.digest = model.params.digest()
    return report


def predict(model: AccordionModel, config: DepthConfig | None, x: np.ndarray, batch: int = 2048):
    return np.concatenate(
        [forward(model, config, x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    )


def evaluate(model: AccordionModel, config: DepthConfig | None, dataset: Dataset) -> float:
    """Fraction of misclassified samples."""
    if len(dataset) == 0:
        raise InputError("evaluation set is empty")
    return float(np.mean(predict(model, config, dataset.x) != dataset.y))
