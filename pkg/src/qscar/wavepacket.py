"""Initial states: Gaussian packets and tube functions along periodic orbits."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .classical import PeriodicOrbit, bs_energies, integrate, with_measured_action
from .domain import Grid, Wavefunction, edge_density, normalize, project_a1
from .potential import ModelParams, PhasePoint

EDGE_TOLERANCE = 1e-12
CLOSURE_TOLERANCE = 1e-3
TUBE_SAMPLES = 2048


class TubeClosureError(RuntimeError):
    pass


class GridLeakError(ValueError):
    def __init__(self, density: float):
        super().__init__(f"packet density {density:.3e} at the box edge exceeds {EDGE_TOLERANCE:g}")
        self.density = density


@dataclass(frozen=True)
class GaussianSpec:
    x0: float = 0.0
    y0: float = 0.0
    dx: float = 0.5
    dy: float = 0.5
    px0: float = 0.0
    py0: float = 0.0
    convention: str = "printed"

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("packet spreads must be positive")
        if self.convention not in ("printed", "variance"):
            raise ValueError("convention must be 'printed' or 'variance'")

    @property
    def center(self) -> PhasePoint:
        return PhasePoint(self.x0, self.y0, self.px0, self.py0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        d = dict(d)
        if "gaussian_width_convention" in d:
            d["convention"] = d.pop("gaussian_width_convention")
        return cls(**d)


@dataclass(frozen=True)
class TubeSpec:
    orbit: PeriodicOrbit
    n: int
    alpha_x: float = 1.0
    alpha_y: float = 1.0
    forced: bool = False

    def __post_init__(self):
        if not (self.alpha_x > 0 and self.alpha_y > 0):
            raise ValueError("frozen Gaussian widths must be positive")
        if self.n not in self.orbit.n_values and not self.forced:
            raise ValueError(f"n={self.n} is not listed for orbit {self.orbit.name}; set forced=True")
        if self.forced and self.n not in self.orbit.n_values:
            warnings.warn(f"n={self.n} is outside the listed values for {self.orbit.name}", stacklevel=2)

    @property
    def epsilon_n(self) -> float:
        return bs_energies(self.orbit, [self.n])[0]


def _check_edge(psi: Wavefunction) -> Wavefunction:
    d = edge_density(psi)
    if d > EDGE_TOLERANCE:
        raise GridLeakError(d)
    return psi


def gaussian(spec: GaussianSpec, grid: Grid, params: ModelParams = ModelParams()) -> Wavefunction:
    """Minimum-uncertainty packet, normalized on the grid.

    With the ``printed`` convention the envelope is exp(-(x-x0)^2 / (4 dx)^2);
    ``variance`` uses exp(-(x-x0)^2 / (4 dx^2)) so that dx is the position spread.
    """
    X, Y = grid.mesh()
    if spec.convention == "printed":
        wx, wy = (4 * spec.dx) ** 2, (4 * spec.dy) ** 2
    else:
        wx, wy = 4 * spec.dx ** 2, 4 * spec.dy ** 2
    env = np.exp(-(X - spec.x0) ** 2 / wx - (Y - spec.y0) ** 2 / wy)
    phase = np.exp(1j * (spec.px0 * X + spec.py0 * Y) / params.hbar)
    psi = normalize(Wavefunction(grid, env * phase, "gaussian"))
    return _check_edge(psi)


def _frozen_gaussian_array(X, Y, z, theta, ax, ay, hbar):
    x, y, px, py = z
    dx, dy = X - x, Y - y
    return np.exp(-ax * dx ** 2 - ay * dy ** 2 + 1j * (px * dx + py * dy + theta) / hbar)


def frozen_gaussian(point: PhasePoint, theta: float, spec: TubeSpec, grid: Grid,
                    params: ModelParams = ModelParams()) -> Wavefunction:
    """Un-normalized frozen Gaussian at a phase-space point with phase theta / hbar."""
    X, Y = grid.mesh()
    a = _frozen_gaussian_array(X, Y, point.as_array(), theta, spec.alpha_x, spec.alpha_y, params.hbar)
    return _check_edge(Wavefunction(grid, a, "frozen_gaussian"))


def phase_theta(s_action, mu, params: ModelParams = ModelParams()):
    """theta = S / hbar - mu pi / 2; ``mu`` may be an array of accumulated indices."""
    return np.asarray(s_action) / params.hbar - np.asarray(mu) * np.pi / 2


def _tube_sum(grid: Grid, z: np.ndarray, theta: np.ndarray, weights: np.ndarray,
              ax: float, ay: float, hbar: float) -> np.ndarray:
    # separable exponentials: each term is an outer product of an x and a y factor
    x, y = grid.x, grid.y
    ex = np.exp(-ax * (x[None, :] - z[:, 0, None]) ** 2 + 1j * z[:, 2, None] * (x[None, :] - z[:, 0, None]) / hbar)
    ey = np.exp(-ay * (y[None, :] - z[:, 1, None]) ** 2 + 1j * z[:, 3, None] * (y[None, :] - z[:, 1, None]) / hbar)
    c = weights * np.exp(1j * theta / hbar)
    return (ex * c[:, None]).T @ ey


def tube_function(spec: TubeSpec, grid: Grid, params: ModelParams = ModelParams(),
                  samples: int = TUBE_SAMPLES, energy_offset: float = 0.0,
                  symmetrize: bool = True, normalized: bool = True) -> Wavefunction:
    """Phase-coherent superposition of frozen Gaussians along the orbit at eps_n.

    Each Gaussian carries the phase theta_t = S(t)/hbar - mu(t) pi/2 built from
    the action integrated along the orbit scaled to eps_n, with the Maslov
    index accrued linearly in time so that theta(T) matches the closed form. The e^{i eps_n t}
    factor cancels the -E t part of the propagated Gaussian's phase on the
    energy shell, so only ``energy_offset`` (default 0) survives as an extra
    e^{i offset t / hbar} weight. The time integral is a rectangle rule with
    ``samples`` points per period. With ``symmetrize`` the orbit's partners
    are added and the sum is projected onto the A1 sector.
    """
    eps = spec.epsilon_n
    orbit = with_measured_action(spec.orbit).scaled(eps)
    starts = (orbit.ic,) + tuple(orbit.partners)
    total = np.zeros(grid.shape, dtype=np.complex128)
    for ic in starts:
        sub = max(8, -(-16384 // samples))
        traj = integrate(ic, orbit.period / (samples * sub), orbit.period, params, every=sub)
        defect = float(np.linalg.norm(traj.z[-1] - traj.z[0]) / max(np.linalg.norm(traj.z[0]), 1.0))
        if defect > CLOSURE_TOLERANCE:
            raise TubeClosureError(f"orbit {orbit.name} does not close at eps_n: defect {defect:.2e}")
        z = traj.z[:samples]
        t = traj.t[:samples]
        # the Maslov phase accrues along the orbit; a constant -mu pi/2 would
        # leave a mismatch at every symmetry image and cancel the A1 component
        theta = phase_theta(traj.action[:samples], orbit.maslov * t / orbit.period, params)
        w = (orbit.period / samples) * np.exp(1j * energy_offset * t / params.hbar)
        total += _tube_sum(grid, z, theta, w, spec.alpha_x, spec.alpha_y, params.hbar)
    if symmetrize and grid.is_square_symmetric():
        total = project_a1(total)
    psi = Wavefunction(grid, total, f"tube_{spec.orbit.name}_n{spec.n}")
    if normalized:
        psi = normalize(psi)
    return _check_edge(psi) if normalized else psi


def orbit_curve(orbit: PeriodicOrbit, energy: float, params: ModelParams = ModelParams(),
                samples: int = TUBE_SAMPLES, symmetrize: bool = True) -> np.ndarray:
    """Points (x, y) along the orbit scaled to ``energy``, with partners and C4v images."""
    o = orbit.scaled(energy)
    pts = []
    for ic in (o.ic,) + tuple(o.partners):
        traj = integrate(ic, o.period / samples, o.period, params)
        pts.append(traj.z[:, :2])
    xy = np.vstack(pts)
    if symmetrize:
        x, y = xy[:, 0], xy[:, 1]
        imgs = [(x, y), (-x, y), (x, -y), (-x, -y), (y, x), (-y, x), (y, -x), (-y, -x)]
        xy = np.vstack([np.column_stack(p) for p in imgs])
    return xy


def mass_near_curve(psi: Wavefunction, curve: np.ndarray, radius: float) -> float:
    """Fraction of |psi|^2 within ``radius`` of a sampled curve."""
    from scipy.spatial import cKDTree

    X, Y = psi.grid.mesh()
    d, _ = cKDTree(curve).query(np.column_stack([X.ravel(), Y.ravel()]), distance_upper_bound=radius)
    rho = psi.density().ravel()
    return float(rho[np.isfinite(d)].sum() / rho.sum())
