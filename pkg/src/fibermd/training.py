"""Mini-batch SGD on freshly synthesized beam patterns."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cnn import ConvNet, NetworkConfig
from .decompose import decompose
from .errors import DimensionMismatch
from .fiber_modes import ModeBasis
from .field_synth import ModeCoefficients, synth_batch
from .metrics import correlation, error_stats

log = logging.getLogger(__name__)

# stream tags keep the init, holdout and batch RNG streams disjoint
_INIT_STREAM = 1
_HOLDOUT_STREAM = 2
_BATCH_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    samples_per_epoch: int = 10_000
    batch_size: int = 64
    epochs: int = 10
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01), (20, 0.001))
    seed: int = 0
    noise_sigma: float = 0.0
    holdout_size: int = 200

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", tuple(tuple(x) for x in self.lr_schedule))
        if min(self.samples_per_epoch, self.batch_size, self.epochs) < 1:
            raise ValueError("sample, batch and epoch counts must be positive")
        if not self.lr_schedule or any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.holdout_size < 0 or self.noise_sigma < 0:
            raise ValueError("holdout_size and noise_sigma must be nonnegative")

    def learning_rate(self, epoch: int) -> float:
        """Rate of the last schedule entry whose threshold is <= ``epoch`` (0-based)."""
        rate = self.lr_schedule[0][1]
        for threshold, lr in sorted(self.lr_schedule):
            if epoch >= threshold:
                rate = lr
        return rate

    @classmethod
    def paper(cls, seed: int = 0) -> "TrainConfig":
        return cls(100_000, 64, 30, ((0, 0.01), (20, 0.001)), seed, 0.0, 1000)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    holdout_correlation: float


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, _BATCH_STREAM, epoch, batch])


def holdout_set(basis: ModeBasis, seed: int, size: int, noise_sigma: float = 0.0):
    rng = np.random.default_rng([seed, _HOLDOUT_STREAM])
    images, _, coeffs = synth_batch(basis, rng, size, noise_sigma)
    return images, coeffs


def evaluate(net: ConvNet, basis: ModeBasis, images,
             truth: list[ModeCoefficients] | None = None, references=None):
    """Mean decomposition correlation (against ``references`` when given) and errors."""
    results = [decompose(net, basis, img) for img in images]
    if references is None:
        corr = [r.correlation for r in results]
    else:
        corr = [correlation(ref, r.reconstructed) for ref, r in zip(references, results)]
    report = error_stats([r.coefficients for r in results], truth) if truth else None
    return float(np.mean(corr)), report, results


def train(basis: ModeBasis, net_config: NetworkConfig, train_config: TrainConfig,
          net: ConvNet | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train from He initialization (or continue ``net``); returns (net, history)."""
    if basis.n_modes != net_config.n_modes:
        raise DimensionMismatch(
            f"basis has {basis.n_modes} modes but the network predicts {net_config.n_modes}")
    if basis.resolution != net_config.input_resolution:
        raise DimensionMismatch("basis resolution differs from the network input")
    tc = train_config
    if net is None:
        net = ConvNet.initialize(net_config, np.random.default_rng([tc.seed, _INIT_STREAM]))
    hold_images, _ = holdout_set(basis, tc.seed, tc.holdout_size)
    n_batches = -(-tc.samples_per_epoch // tc.batch_size)
    history = []
    for epoch in range(tc.epochs):
        lr = tc.learning_rate(epoch)
        losses = []
        for b in range(n_batches):
            size = min(tc.batch_size, tc.samples_per_epoch - b * tc.batch_size)
            images, labels, _ = synth_batch(basis, batch_rng(tc.seed, epoch, b), size,
                                            tc.noise_sigma)
            loss, grads = net.loss_and_grads(images, labels)
            net.sgd_step(grads, lr)
            losses.append(loss * size)
        mean_loss = float(np.sum(losses) / tc.samples_per_epoch)
        hold_corr = evaluate(net, basis, hold_images)[0] if tc.holdout_size else float("nan")
        record = EpochRecord(epoch + 1, mean_loss, hold_corr)
        history.append(record)
        log.info("epoch %d lr %g loss %.6f holdout C %.5f", record.epoch, lr, mean_loss, hold_corr)
        if on_epoch is not None:
            on_epoch(record)
    return net, history
