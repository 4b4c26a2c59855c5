"""Coupled quartic oscillator and its mechanical-similarity scaling."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .domain import Grid, Wavefunction, normalize


@dataclass(frozen=True)
class ModelParams:
    epsilon: float = 0.01
    hbar: float = 1.0
    lyapunov_coeff: float = 0.385
    poincare_area_coeff: float = 11.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")

    def lyapunov(self, energy: float) -> float:
        return self.lyapunov_coeff * energy ** 0.25

    def poincare_area(self, energy: float) -> float:
        return self.poincare_area_coeff * energy ** 0.75

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PhasePoint:
    x: float
    y: float
    px: float
    py: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("phase point must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.px, self.py], dtype=float)

    @classmethod
    def from_array(cls, z) -> "PhasePoint":
        return cls(*(float(v) for v in z[:4]))


def potential_value(x, y, params: ModelParams = ModelParams()):
    """V = x^2 y^2 / 2 + eps (x^4 + y^4) / 4; broadcasts over arrays."""
    x2 = np.multiply(x, x)
    y2 = np.multiply(y, y)
    return 0.5 * x2 * y2 + 0.25 * params.epsilon * (x2 * x2 + y2 * y2)


def potential_gradient(x, y, params: ModelParams = ModelParams()):
    return (x * y * y + params.epsilon * x ** 3, x * x * y + params.epsilon * y ** 3)


def hamiltonian_value(p: PhasePoint, params: ModelParams = ModelParams()) -> float:
    return 0.5 * (p.px ** 2 + p.py ** 2) + float(potential_value(p.x, p.y, params))


def similarity_factor(energy: float, energy_prime: float) -> float:
    if not (energy > 0 and energy_prime > 0):
        raise ValueError("energies must be positive for similarity scaling")
    return (energy_prime / energy) ** 0.25


@dataclass(frozen=True)
class ScaledPoint:
    point: PhasePoint
    eta: float

    @property
    def time_factor(self) -> float:
        return 1.0 / self.eta

    @property
    def action_factor(self) -> float:
        return self.eta ** 3


def scale_phase_point(p: PhasePoint, energy: float, energy_prime: float,
                      params: ModelParams = ModelParams()) -> ScaledPoint:
    """Map a point at energy E onto the similar point at E'.

    Positions scale by eta = (E'/E)^(1/4), momenta by eta^2; times scale by
    1/eta and actions by eta^3 (see ``ScaledPoint``).
    """
    eta = similarity_factor(energy, energy_prime)
    q = PhasePoint(eta * p.x, eta * p.y, eta ** 2 * p.px, eta ** 2 * p.py)
    return ScaledPoint(q, eta)


def scale_wavefunction_domain(psi: Wavefunction, energy: float, energy_prime: float) -> Wavefunction:
    """Resample psi on its own grid as out(x, y) = psi(eta x, eta y), renormalized.

    Features of size s shrink to s/eta. Used to show fields computed at one
    energy in the frame of another; out-of-box samples are taken as zero.
    """
    eta = similarity_factor(energy, energy_prime)
    if eta == 1.0:
        return psi
    grid = psi.grid
    out = _resample(psi.amplitudes, grid, eta)
    return normalize(psi.with_amplitudes(out))


def _resample(a: np.ndarray, grid: Grid, eta: float) -> np.ndarray:
    from scipy.ndimage import map_coordinates

    X, Y = grid.mesh()
    ix = (eta * X - grid.x_min) / grid.dx
    iy = (eta * Y - grid.y_min) / grid.dy
    coords = np.array([ix, iy])
    re = map_coordinates(a.real, coords, order=3, mode="constant", cval=0.0)
    im = map_coordinates(a.imag, coords, order=3, mode="constant", cval=0.0)
    return re + 1j * im
