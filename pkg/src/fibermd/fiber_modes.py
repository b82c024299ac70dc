"""Step-index LP mode solver under the weak-guidance approximation.

Lengths are in micrometres throughout. A guided LP_lm mode is described by
the core parameter ``u`` and cladding decay parameter ``w`` with
``u**2 + w**2 == V**2``; fields are ``J_l(u r/a)`` in the core and a
continuity-matched ``K_l(w r/a)`` tail in the cladding, times ``cos(l phi)``
(even) or ``sin(l phi)`` (odd).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy.special import jv, kv

from .errors import InsufficientModes, NoGuidedModes, ResolutionTooCoarse

Parity = Literal["even", "odd"]

SCAN_SAMPLES = 2000
SCAN_EPS = 1e-9
BISECT_TOL = 1e-12
BISECT_MAX_ITER = 200
DEFAULT_WINDOW_FACTOR = 2.0


@dataclass(frozen=True)
class FiberSpec:
    """Physical step-index fiber.

    Parameters
    ----------
    core_radius : float
        Core radius a [um].
    numerical_aperture : float
        NA (dimensionless).
    wavelength : float
        Vacuum wavelength [um].
    """

    core_radius: float
    numerical_aperture: float
    wavelength: float

    def __post_init__(self):
        if not self.core_radius > 0 or not self.wavelength > 0:
            raise ValueError(f"core_radius and wavelength must be positive: {self}")
        if not self.numerical_aperture >= 0:
            raise ValueError(f"numerical_aperture must be nonnegative: {self}")

    @property
    def v(self) -> float:
        return v_number(self)


@dataclass(frozen=True, order=True)
class ModeId:
    l: int
    m: int
    parity: Parity = "even"

    def __post_init__(self):
        if self.l < 0 or self.m < 1:
            raise ValueError(f"invalid mode indices l={self.l}, m={self.m}")
        if self.parity not in ("even", "odd"):
            raise ValueError(f"parity must be 'even' or 'odd', got {self.parity!r}")
        if self.l == 0 and self.parity != "even":
            raise ValueError("l=0 modes have a single (even) variant")

    @property
    def label(self) -> str:
        suffix = "" if self.l == 0 else self.parity[0]
        return f"LP{self.l}{self.m}{suffix}"

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class GridSpec:
    """Square sampling window centred on the fiber axis.

    Pixel centres span ``[-window_half_width, window_half_width]`` on both axes.
    """

    resolution: int
    window_half_width: float

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError(f"resolution must be >= 16, got {self.resolution}")
        if not self.window_half_width > 0:
            raise ValueError("window_half_width must be positive")

    @classmethod
    def for_fiber(cls, fiber: FiberSpec, resolution: int,
                  window_factor: float = DEFAULT_WINDOW_FACTOR) -> "GridSpec":
        return cls(resolution, window_factor * fiber.core_radius)

    @property
    def pitch(self) -> float:
        return 2.0 * self.window_half_width / (self.resolution - 1)

    @property
    def pixel_area(self) -> float:
        return self.pitch ** 2

    def coordinates(self) -> tuple[NDArray, NDArray]:
        """Physical (x, y) of every pixel; row index follows y, column index x."""
        axis = np.linspace(-self.window_half_width, self.window_half_width, self.resolution)
        return np.meshgrid(axis, axis, indexing="xy")


@dataclass(frozen=True)
class ModeSolution:
    mode: ModeId
    u: float
    w: float

    @property
    def label(self) -> str:
        return self.mode.label


@dataclass(frozen=True)
class ModeBasis:
    """Normalized mode fields sampled on a grid, in canonical order."""

    fiber: FiberSpec
    grid: GridSpec
    solutions: tuple[ModeSolution, ...]
    fields: NDArray = field(repr=False)  # (N, resolution, resolution), float64

    @property
    def modes(self) -> list[ModeId]:
        return [s.mode for s in self.solutions]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.solutions]

    @property
    def n_modes(self) -> int:
        return len(self.solutions)

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    def gram(self) -> NDArray:
        """Discrete inner products <psi_i, psi_j> with the pixel-area measure."""
        flat = self.fields.reshape(self.n_modes, -1)
        return flat @ flat.T * self.grid.pixel_area


def v_number(fiber: FiberSpec) -> float:
    """Normalized frequency ``V = 2 pi a NA / lambda``."""
    return 2.0 * np.pi * fiber.core_radius * fiber.numerical_aperture / fiber.wavelength


def characteristic(u, v: float, l: int, w=None):
    """LP characteristic function; its zeros in ``(0, V)`` are guided modes.

    ``f(u) = u J_{l-1}(u)/J_l(u) + w K_{l-1}(w)/K_l(w)`` with ``w = sqrt(V^2 - u^2)``.
    Poles sit at the zeros of ``J_l``. Pass ``w`` directly when it is too small
    to recover from ``u``.
    """
    u = np.asarray(u, dtype=float)
    if w is None:
        w = np.sqrt(v * v - u * u)
    with np.errstate(divide="ignore", invalid="ignore"):
        return u * jv(l - 1, u) / jv(l, u) + w * kv(l - 1, w) / kv(l, w)


def _bisect(fn, lo: float, hi: float) -> float:
    f_lo = fn(lo)
    mid = 0.5 * (lo + hi)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f_mid = fn(mid)
        if abs(f_mid) < BISECT_TOL or hi - lo < 4 * np.finfo(float).eps * max(1.0, mid):
            break
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return mid


def _roots_for_order(v: float, l: int) -> list[float]:
    u = np.linspace(SCAN_EPS, v - SCAN_EPS, SCAN_SAMPLES)
    f = characteristic(u, v, l)
    j = jv(l, u)
    roots = []
    for k in range(SCAN_SAMPLES - 1):
        if not (np.isfinite(f[k]) and np.isfinite(f[k + 1])):
            continue
        if np.sign(f[k]) == np.sign(f[k + 1]) or f[k] == 0.0:
            continue
        if np.sign(j[k]) != np.sign(j[k + 1]):
            continue  # pole of J_{l-1}/J_l, not a root
        roots.append(_bisect(lambda x: float(characteristic(x, v, l)), u[k], u[k + 1]))
    return roots


def _weak_fundamental(v: float) -> tuple[float, float] | None:
    """LP01 root for small V, where u sits closer to V than a u-scan can resolve.

    Searches in log(w) instead; returns (u, w), or None if even w ~ 1e-300 is
    not enough.
    """
    def g(t: float) -> float:
        w = np.exp(t)
        return float(characteristic(np.sqrt(v * v - w * w), v, 0, w))

    lo, hi = np.log(1e-300), np.log(v * (1 - 1e-6))
    if np.sign(g(lo)) == np.sign(g(hi)):
        return None
    w = float(np.exp(_bisect(g, lo, hi)))
    return float(np.sqrt(v * v - w * w)), w


def solve_modes(fiber: FiberSpec) -> list[ModeSolution]:
    """All guided LP modes of ``fiber`` in canonical order.

    Mode groups (l, m) are ordered by increasing ``u`` (decreasing effective
    index); each l > 0 group expands to its even then odd variant.
    """
    v = v_number(fiber)
    if not v > 0:
        raise NoGuidedModes(f"V must be positive, got {v}")
    groups = []
    l = 0
    while True:
        roots = [(u, float(np.sqrt(v * v - u * u))) for u in _roots_for_order(v, l)]
        if l == 0 and not roots:
            weak = _weak_fundamental(v)
            roots = [] if weak is None else [weak]
        if not roots:
            break
        for m, (u, w) in enumerate(roots, start=1):
            groups.append((u, l, m, w))
        l += 1
    if not groups:
        raise NoGuidedModes(f"no guided modes found for V={v}")
    groups.sort()
    out = []
    for u, l, m, w in groups:
        parities = ("even",) if l == 0 else ("even", "odd")
        out.extend(ModeSolution(ModeId(l, m, p), float(u), w) for p in parities)
    return out


def mode_field(sol: ModeSolution, fiber: FiberSpec, x: NDArray, y: NDArray) -> NDArray:
    """Unnormalized real field of one mode at physical points (x, y)."""
    a = fiber.core_radius
    l, u, w = sol.mode.l, sol.u, sol.w
    r = np.hypot(x, y) / a
    phi = np.arctan2(y, x)
    radial = np.empty_like(r)
    core = r <= 1.0
    radial[core] = jv(l, u * r[core])
    radial[~core] = kv(l, w * r[~core]) * (jv(l, u) / kv(l, w))
    angular = np.cos(l * phi) if sol.mode.parity == "even" else np.sin(l * phi)
    return radial * angular


def sample_basis(fiber: FiberSpec, grid: GridSpec, first_n: int | None = None) -> ModeBasis:
    """Sample and L2-normalize the first ``first_n`` guided modes on ``grid``."""
    solutions = solve_modes(fiber)
    if first_n is None:
        first_n = len(solutions)
    if first_n < 1 or first_n > len(solutions):
        raise InsufficientModes(
            f"requested {first_n} modes but the fiber guides {len(solutions)}")
    if grid.window_half_width < fiber.core_radius:
        raise ValueError("window_half_width must be at least the core radius")
    solutions = solutions[:first_n]
    x, y = grid.coordinates()
    if np.count_nonzero(np.hypot(x, y) <= fiber.core_radius) < 16:
        raise ResolutionTooCoarse("fewer than 16 pixels sample the fiber core")
    fields = np.empty((first_n, grid.resolution, grid.resolution))
    for k, sol in enumerate(solutions):
        psi = mode_field(sol, fiber, x, y)
        norm = np.sum(psi * psi) * grid.pixel_area
        if not (np.isfinite(norm) and norm > 0):
            raise ResolutionTooCoarse(f"{sol.label} has zero discrete norm on this grid")
        psi /= np.sqrt(norm)
        if abs(np.sum(psi * psi) * grid.pixel_area - 1.0) > 1e-6:
            raise ResolutionTooCoarse(f"{sol.label} failed normalization")
        fields[k] = psi
    fields.setflags(write=False)
    return ModeBasis(fiber, grid, tuple(solutions), fields)


def basis_for(fiber: FiberSpec, resolution: int, n_modes: int | None = None,
              window_factor: float = DEFAULT_WINDOW_FACTOR) -> ModeBasis:
    """Convenience wrapper: default window of ``window_factor`` core radii."""
    return sample_basis(fiber, GridSpec.for_fiber(fiber, resolution, window_factor), n_modes)


# fibers used as worked examples
SIM_FIBER = FiberSpec(core_radius=12.5, numerical_aperture=0.08, wavelength=1.064)
EXP_FIBER = FiberSpec(core_radius=4.1, numerical_aperture=0.14, wavelength=1.073)
