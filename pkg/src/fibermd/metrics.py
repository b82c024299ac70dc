"""Image correlation, residuals and coefficient error statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConstantImage, DimensionMismatch
from .field_synth import ModeCoefficients


def correlation(i_m: NDArray, i_r: NDArray) -> float:
    """Absolute normalized cross-correlation of two mean-subtracted images.

    Pixel sums stand in for the area integrals; the uniform pixel area cancels.
    """
    i_m = np.asarray(i_m, dtype=float)
    i_r = np.asarray(i_r, dtype=float)
    if i_m.shape != i_r.shape:
        raise DimensionMismatch(f"image shapes differ: {i_m.shape} vs {i_r.shape}")
    dm = i_m - i_m.mean()
    dr = i_r - i_r.mean()
    vm = np.sum(dm * dm)
    vr = np.sum(dr * dr)
    if vm <= 0 or vr <= 0:
        raise ConstantImage("correlation is undefined for a constant image")
    c = abs(np.sum(dm * dr)) / np.sqrt(vm * vr)
    return float(min(c, 1.0))


def correlation_many(i_m: NDArray, stack: NDArray) -> NDArray:
    """Correlation of ``i_m`` against each image in ``stack`` (K, H, W)."""
    i_m = np.asarray(i_m, dtype=float)
    if stack.shape[1:] != i_m.shape:
        raise DimensionMismatch(f"image shapes differ: {i_m.shape} vs {stack.shape[1:]}")
    dm = (i_m - i_m.mean()).reshape(-1)
    flat = stack.reshape(stack.shape[0], -1)
    dr = flat - flat.mean(axis=1, keepdims=True)
    vm = dm @ dm
    vr = np.einsum("ij,ij->i", dr, dr)
    if vm <= 0 or np.any(vr <= 0):
        raise ConstantImage("correlation is undefined for a constant image")
    return np.minimum(np.abs(dr @ dm) / np.sqrt(vm * vr), 1.0)


def residual(i_m: NDArray, i_r: NDArray) -> NDArray:
    if np.shape(i_m) != np.shape(i_r):
        raise DimensionMismatch(f"image shapes differ: {np.shape(i_m)} vs {np.shape(i_r)}")
    return np.abs(np.asarray(i_m, dtype=float) - np.asarray(i_r, dtype=float))


@dataclass(frozen=True)
class ErrorReport:
    """Mean absolute coefficient errors in percent.

    ``per_mode_phase_error`` has N-1 entries (modes 2..N).
    """

    per_mode_weight_error: NDArray
    per_mode_phase_error: NDArray

    @property
    def weight_error(self) -> float:
        return float(np.mean(self.per_mode_weight_error))

    @property
    def phase_error(self) -> float:
        if self.per_mode_phase_error.size == 0:
            return 0.0
        return float(np.mean(self.per_mode_phase_error))


def error_stats(predicted: Sequence[ModeCoefficients],
                truth: Sequence[ModeCoefficients]) -> ErrorReport:
    """Per-mode mean |dw| and mean ||theta_p|-|theta_t||/(2 pi), in percent.

    Phase magnitudes are compared so a conjugated prediction carries no error.
    """
    if len(predicted) != len(truth) or not predicted:
        raise DimensionMismatch("need two equal-length, nonempty coefficient lists")
    n = truth[0].n_modes
    if any(c.n_modes != n for c in (*predicted, *truth)):
        raise DimensionMismatch("all coefficient sets must have the same mode count")
    wp = np.stack([c.weights for c in predicted])
    wt = np.stack([c.weights for c in truth])
    pp = np.stack([c.phases for c in predicted]).reshape(len(predicted), n - 1)
    pt = np.stack([c.phases for c in truth]).reshape(len(truth), n - 1)
    dw = np.abs(wp - wt).mean(axis=0) * 100.0
    dth = (np.abs(np.abs(pp) - np.abs(pt)) / (2 * np.pi)).mean(axis=0) * 100.0
    return ErrorReport(dw, dth)
