"""Inference pipeline: network prediction, phase-sign search, refinement, oracle."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .cnn import ConvNet
from .errors import ConstantImage, DimensionMismatch, TooManyModes
from .fiber_modes import ModeBasis
from .field_synth import ModeCoefficients, decode_label, render
from .metrics import correlation, correlation_many

TIE_TOL = 1e-12
ZERO_PHASE = 1e-12
SPSA_GAIN_DECAY = 0.602
SPSA_PERTURBATION_DECAY = 0.101


@dataclass(frozen=True)
class DecompositionResult:
    coefficients: ModeCoefficients
    correlation: float
    reconstructed: NDArray
    candidates_evaluated: int
    elapsed_ms: float
    forward_ms: float = 0.0
    disambiguation_ms: float = 0.0


def _canonical_rank(phases: NDArray) -> int:
    """0 if the first nonzero phase is nonnegative (or all are zero), else 1."""
    nz = np.flatnonzero(np.abs(phases) > ZERO_PHASE)
    return 0 if nz.size == 0 or phases[nz[0]] >= 0 else 1


def _pick(scores: NDArray, phase_rows: NDArray) -> int:
    """Index of the best score; near-ties prefer the canonical (non-negative) sign."""
    best = scores.max()
    tied = np.flatnonzero(scores >= best - TIE_TOL)
    for k in tied:
        if _canonical_rank(phase_rows[k]) == 0:
            return int(k)
    return int(tied[0])


def _intensities(fields: NDArray, amps: NDArray, phases: NDArray) -> NDArray:
    """Intensity stack for K coefficient rows; ``phases`` (K, N-1) excludes the fundamental."""
    full = np.concatenate((np.zeros((phases.shape[0], 1)), phases), axis=1)
    c = amps * np.exp(1j * full)
    u = c @ fields.reshape(fields.shape[0], -1)
    return (u.real ** 2 + u.imag ** 2).reshape(-1, *fields.shape[1:])


def sign_patterns(n_phases: int) -> NDArray:
    """All 2**n_phases sign vectors, starting from all-positive."""
    return np.array(list(itertools.product((1.0, -1.0), repeat=n_phases))).reshape(
        2 ** n_phases, n_phases)


def enumerate_candidates(basis: ModeBasis, weights, magnitude_phases) -> tuple[NDArray, NDArray]:
    """Phase candidates (2**(N-1), N-1) and their intensity images."""
    weights = np.asarray(weights, dtype=float)
    mags = np.asarray(magnitude_phases, dtype=float)
    if weights.size != basis.n_modes or mags.size != basis.n_modes - 1:
        raise DimensionMismatch("weights/phases do not match the basis mode count")
    phases = sign_patterns(mags.size) * mags
    return phases, _intensities(basis.fields, np.sqrt(weights), phases)


def disambiguate(basis: ModeBasis, image: NDArray, weights,
                 magnitude_phases, return_scores: bool = False):
    """Choose the phase signs whose reconstruction best correlates with ``image``.

    All 2**(N-1) sign combinations are scored. Among maximal candidates (within
    1e-12) the one whose first nonzero phase is nonnegative wins.
    """
    phases, stack = enumerate_candidates(basis, weights, magnitude_phases)
    scores = correlation_many(image, stack)
    k = _pick(scores, phases)
    coeffs = ModeCoefficients(weights, np.clip(phases[k], -np.pi, np.pi))
    return (coeffs, scores, phases) if return_scores else coeffs


def decompose(net: ConvNet, basis: ModeBasis, image: NDArray) -> DecompositionResult:
    """One forward pass, label decoding, sign search and reconstruction."""
    if image.shape != (basis.resolution, basis.resolution):
        raise DimensionMismatch(
            f"image {image.shape} does not match basis resolution {basis.resolution}")
    t0 = time.perf_counter()
    out = net.forward(image[None])[0]
    t1 = time.perf_counter()
    weights, mags = decode_label(out)
    coeffs = disambiguate(basis, image, weights, mags)
    recon = render(basis, coeffs)
    corr = correlation(image, recon)
    t2 = time.perf_counter()
    return DecompositionResult(
        coefficients=coeffs,
        correlation=corr,
        reconstructed=recon,
        candidates_evaluated=2 ** (basis.n_modes - 1),
        elapsed_ms=(t2 - t0) * 1e3,
        forward_ms=(t1 - t0) * 1e3,
        disambiguation_ms=(t2 - t1) * 1e3,
    )


class _CorrelationObjective:
    """Correlation with a fixed target as a function of (amplitudes, phases)."""

    def __init__(self, basis: ModeBasis, image: NDArray):
        self.fields = basis.fields.reshape(basis.n_modes, -1)
        self.n = basis.n_modes
        d = np.asarray(image, dtype=float).reshape(-1)
        d = d - d.mean()
        self.target = d / np.sqrt(d @ d)

    def __call__(self, p: NDArray) -> float:
        c = p[:self.n] * np.exp(1j * np.concatenate(([0.0], p[self.n:])))
        u = c @ self.fields
        i_r = u.real ** 2 + u.imag ** 2
        i_r -= i_r.mean()
        norm = np.sqrt(i_r @ i_r)
        return abs(i_r @ self.target) / norm if norm > 0 else 0.0


def _unpack(p: NDArray, n: int) -> ModeCoefficients:
    # negative amplitudes are a pi phase shift; re-reference to the fundamental
    c = p[:n] * np.exp(1j * np.concatenate(([0.0], p[n:])))
    if abs(c[0]) > 0:
        c = c * np.exp(-1j * np.angle(c[0]))
    return ModeCoefficients.from_unnormalized(np.abs(c) ** 2, np.angle(c[1:]))


def spgd_refine(basis: ModeBasis, image: NDArray, init: ModeCoefficients,
                gain: float = 0.8, perturbation: float = 0.05, iterations: int = 1000,
                rng: np.random.Generator | None = None) -> ModeCoefficients:
    """Stochastic parallel gradient descent on the correlation, best-so-far.

    The search runs over unconstrained amplitudes (weights are their normalized
    squares) and free phases. Step k draws a Rademacher perturbation ``s``,
    scores ``p +- c_k*s`` and moves ``p`` by ``a_k * (J+ - J-) / (2 c_k) * s``.
    ``a_k`` and ``c_k`` start at ``gain`` and ``perturbation`` and decay with the
    usual SPSA exponents (0.602, 0.101), so late steps can resolve a near-optimum.
    """
    if iterations <= 0:
        return init
    if init.n_modes != basis.n_modes:
        raise DimensionMismatch("init does not match the basis mode count")
    rng = np.random.default_rng(0) if rng is None else rng
    objective = _CorrelationObjective(basis, image)
    n = basis.n_modes
    p0 = np.concatenate((init.amplitudes, init.phases))
    p = p0.copy()
    best_p, best_j = p0, objective(p0)
    stability = 0.1 * iterations
    for k in range(iterations):
        a_k = gain * ((stability + 1) / (k + 1 + stability)) ** SPSA_GAIN_DECAY
        c_k = perturbation / (k + 1) ** SPSA_PERTURBATION_DECAY
        s = rng.choice((-1.0, 1.0), size=p.size)
        p_plus, p_minus = p + c_k * s, p - c_k * s
        j_plus, j_minus = objective(p_plus), objective(p_minus)
        p = p + a_k * (j_plus - j_minus) / (2 * c_k) * s
        j_new = objective(p)
        for cand, j in ((p_plus, j_plus), (p_minus, j_minus), (p, j_new)):
            if j > best_j:
                best_p, best_j = cand, j
        if j_new < best_j:
            p = best_p.copy()  # restart from the best point instead of drifting
    if best_p is p0:
        return init
    return _unpack(best_p, n)


def simplex_grid(n: int, steps: int) -> NDArray:
    """All weight vectors with entries k/(steps-1) summing to 1."""
    total = steps - 1
    rows = [c for c in itertools.product(range(total + 1), repeat=n - 1) if sum(c) <= total]
    grid = np.array([(*c, total - sum(c)) for c in rows], dtype=float)
    return grid / total


def brute_force_decompose(basis: ModeBasis, image: NDArray, grid_steps: int = 21) -> ModeCoefficients:
    """Exhaustive max-correlation search over a simplex x phase-cube grid (N <= 3).

    Intensity is linear in the pairwise mode products ``psi_i psi_j``, so every
    candidate's correlation reduces to small quadratic forms in those products;
    no candidate image is materialized.
    """
    n = basis.n_modes
    if n > 3:
        raise TooManyModes(f"brute force is limited to 3 modes, got {n}")
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    weights = simplex_grid(n, grid_steps)
    axis = np.linspace(-np.pi, np.pi, grid_steps)
    phases = np.array(list(itertools.product(axis, repeat=n - 1))).reshape(-1, n - 1)
    wi, pi = np.meshgrid(np.arange(len(weights)), np.arange(len(phases)), indexing="ij")
    wi, pi = wi.reshape(-1), pi.reshape(-1)

    flat = basis.fields.reshape(n, -1)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    prods = np.stack([flat[i] * flat[j] for i, j in pairs])
    target = np.asarray(image, dtype=float).reshape(-1)
    target = target - target.mean()
    var_m = target @ target
    if var_m <= 0:
        raise ConstantImage("correlation is undefined for a constant image")
    p_dot_t = prods @ target
    p_sum = prods.sum(axis=1)
    gram = prods @ prods.T

    amps = np.sqrt(weights)[wi]
    full = np.concatenate((np.zeros((wi.size, 1)), phases[pi]), axis=1)
    q = np.empty((wi.size, len(pairs)))
    for k, (i, j) in enumerate(pairs):
        if i == j:
            q[:, k] = amps[:, i] ** 2
        else:
            q[:, k] = 2 * amps[:, i] * amps[:, j] * np.cos(full[:, i] - full[:, j])
    total = q @ p_sum
    var_r = np.einsum("km,mn,kn->k", q, gram, q) - total ** 2 / target.size
    scores = np.abs(q @ p_dot_t) / np.sqrt(np.clip(var_r, 1e-300, None) * var_m)
    k = _pick(scores, phases[pi])
    return ModeCoefficients(weights[wi[k]], phases[pi[k]])
