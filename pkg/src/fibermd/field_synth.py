"""Mode superposition, intensity rendering, labels, noise and frame preprocessing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .errors import DegenerateLabel, DimensionMismatch, EmptyFrame
from .fiber_modes import ModeBasis


@dataclass(frozen=True)
class ModeCoefficients:
    """Modal power fractions ``weights`` (N) and relative phases ``phases`` (N-1).

    The fundamental mode's phase is fixed at zero and not stored.
    """

    weights: NDArray
    phases: NDArray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        p = np.array(self.phases, dtype=float).reshape(-1)
        if w.size < 1 or p.size != w.size - 1:
            raise DimensionMismatch(f"need N weights and N-1 phases, got {w.size} and {p.size}")
        if np.any(w < -1e-12) or np.any(w > 1 + 1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex: {w}")
        if np.any(np.abs(p) > np.pi + 1e-12):
            raise ValueError(f"phases must lie in [-pi, pi]: {p}")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "phases", p)

    @property
    def n_modes(self) -> int:
        return self.weights.size

    @property
    def amplitudes(self) -> NDArray:
        return np.sqrt(np.clip(self.weights, 0.0, None))

    @property
    def full_phases(self) -> NDArray:
        return np.concatenate(([0.0], self.phases))

    def conjugate(self) -> "ModeCoefficients":
        return ModeCoefficients(self.weights, -self.phases)

    @classmethod
    def from_unnormalized(cls, weights, phases) -> "ModeCoefficients":
        """Project raw nonnegative weights onto the simplex and wrap phases."""
        w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        return cls(w / w.sum(), wrap_phase(np.asarray(phases, dtype=float)))


def wrap_phase(theta):
    """Map angles into [-pi, pi]; exact +-pi are kept as given."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(np.abs(theta) <= np.pi, theta, wrapped)


def superpose(basis: ModeBasis, coeffs: ModeCoefficients) -> NDArray:
    """Complex field ``sum_n rho_n exp(i theta_n) psi_n``."""
    if coeffs.n_modes != basis.n_modes:
        raise DimensionMismatch(
            f"coefficients have {coeffs.n_modes} modes, basis has {basis.n_modes}")
    c = coeffs.amplitudes * np.exp(1j * coeffs.full_phases)
    return np.tensordot(c, basis.fields, axes=1)


def intensity(field: NDArray, normalize: bool = False) -> NDArray:
    img = np.abs(field) ** 2
    if normalize:
        img = normalize_max(img)
    return img


def normalize_max(image: NDArray) -> NDArray:
    """Scale so the brightest pixel is 1; an all-zero image is returned as is."""
    peak = image.max()
    return image / peak if peak > 0 else image.copy()


def render(basis: ModeBasis, coeffs: ModeCoefficients, normalize: bool = True) -> NDArray:
    return intensity(superpose(basis, coeffs), normalize)


def sample_coefficients(rng: np.random.Generator, n_modes: int) -> ModeCoefficients:
    """Weights uniform on the simplex, phases uniform on [-pi, pi]."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    e = rng.standard_exponential(n_modes)
    phases = rng.uniform(-np.pi, np.pi, n_modes - 1)
    return ModeCoefficients(e / e.sum(), phases)


def encode_label(coeffs: ModeCoefficients) -> NDArray:
    """``[w_1..w_N, (cos(theta_n)+1)/2 for n=2..N]``, length 2N-1, all in [0, 1]."""
    s = (np.cos(coeffs.phases) + 1.0) / 2.0
    return np.clip(np.concatenate((coeffs.weights, s)), 0.0, 1.0)


def n_modes_for_label(length: int) -> int:
    if length < 1 or length % 2 == 0:
        raise DimensionMismatch(f"label length must be 2N-1, got {length}")
    return (length + 1) // 2


def decode_label(label) -> tuple[NDArray, NDArray]:
    """Return (weights on the simplex, phase magnitudes in [0, pi])."""
    label = np.asarray(label, dtype=float).reshape(-1)
    n = n_modes_for_label(label.size)
    raw = np.clip(label[:n], 0.0, None)
    if np.all(raw < 1e-9):
        raise DegenerateLabel("all weight entries vanish")
    weights = raw / raw.sum()
    mags = np.arccos(np.clip(2.0 * label[n:] - 1.0, -1.0, 1.0))
    return weights, mags


def add_noise(image: NDArray, sigma: float, rng: np.random.Generator) -> NDArray:
    """Multiplicative speckle ``pixel * (1 + sigma g)`` with g ~ N(0, 1), clamped at 0."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return image.copy()
    g = rng.standard_normal(image.shape)
    return np.clip(image * (1.0 + sigma * g), 0.0, None)


def quantize_8bit(image: NDArray) -> NDArray:
    """Emulate an 8-bit camera: max-normalize, round to 1/255 steps."""
    return np.round(normalize_max(image) * 255.0) / 255.0


def centroid(image: NDArray) -> tuple[float, float]:
    """Intensity-weighted (row, col) centre of mass."""
    total = image.sum()
    rows = np.arange(image.shape[0])
    cols = np.arange(image.shape[1])
    return (float(image.sum(axis=1) @ rows / total), float(image.sum(axis=0) @ cols / total))


def resize_bilinear(image: NDArray, size: int) -> NDArray:
    """Bilinear resample a square image to ``size`` x ``size`` (pixel-centre aligned)."""
    n = image.shape[0]
    if n == size:
        return image.astype(float, copy=True)
    coords = (np.arange(size) + 0.5) * (n / size) - 0.5
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(image.astype(float), [rr, cc], order=1, mode="nearest")


def preprocess_frame(raw: NDArray, target_resolution: int) -> NDArray:
    """Centroid-centred square crop, bilinear resize and max normalization."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D frame, got shape {raw.shape}")
    if np.any(raw < 0):
        raise ValueError("frame has negative pixels")
    if not np.any(raw > 0):
        raise EmptyFrame("frame has no nonzero pixel")
    h, w = raw.shape
    side = min(h, w)
    cy, cx = centroid(raw)
    top = int(np.clip(round(cy - (side - 1) / 2), 0, h - side))
    left = int(np.clip(round(cx - (side - 1) / 2), 0, w - side))
    crop = raw[top:top + side, left:left + side]
    return normalize_max(resize_bilinear(crop, target_resolution))


def synth_batch(basis: ModeBasis, rng: np.random.Generator, count: int,
                noise_sigma: float = 0.0) -> tuple[NDArray, NDArray, list[ModeCoefficients]]:
    """Draw ``count`` random samples: (images (count, R, R), labels (count, 2N-1), coeffs)."""
    coeffs = [sample_coefficients(rng, basis.n_modes) for _ in range(count)]
    images = np.empty((count, basis.resolution, basis.resolution))
    for k, c in enumerate(coeffs):
        img = render(basis, c)
        if noise_sigma > 0:
            img = normalize_max(add_noise(img, noise_sigma, rng))
        images[k] = img
    labels = np.stack([encode_label(c) for c in coeffs]) if coeffs else np.empty(
        (0, 2 * basis.n_modes - 1))
    return images, labels, coeffs
