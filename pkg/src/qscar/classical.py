"""Classical orbits: RK4 integration with action, Bohr-Sommerfeld energies, Ehrenfest time."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

from .potential import ModelParams, PhasePoint, hamiltonian_value, potential_value, similarity_factor

DEFAULT_DT = 1e-4


class IntegrationError(FloatingPointError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled orbit: ``z`` has columns x, y, px, py; ``sx``, ``sy`` are the actions."""

    dt: float
    t: np.ndarray
    z: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    energy: float

    def __len__(self):
        return self.z.shape[0]

    @property
    def action(self) -> np.ndarray:
        return self.sx + self.sy

    def point(self, k: int) -> PhasePoint:
        return PhasePoint.from_array(self.z[k])

    def energies(self, params: ModelParams = ModelParams()) -> np.ndarray:
        x, y, px, py = self.z.T
        return 0.5 * (px ** 2 + py ** 2) + potential_value(x, y, params)


@numba.njit(cache=True)
def _rhs(s, eps):
    x, y, px, py = s[0], s[1], s[2], s[3]
    out = np.empty(6)
    out[0] = px
    out[1] = py
    out[2] = -(x * y * y + eps * x ** 3)
    out[3] = -(x * x * y + eps * y ** 3)
    out[4] = px * px
    out[5] = py * py
    return out


@numba.njit(cache=True)
def _rk4_step(s, dt, eps):
    k1 = _rhs(s, eps)
    k2 = _rhs(s + 0.5 * dt * k1, eps)
    k3 = _rhs(s + 0.5 * dt * k2, eps)
    k4 = _rhs(s + dt * k3, eps)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@numba.njit(cache=True)
def _rk4(s0, dt, n_steps, eps, every):
    n_out = n_steps // every + 1
    out = np.empty((n_out, 6))
    s = s0.copy()
    out[0] = s
    bad = -1
    j = 1
    for k in range(1, n_steps + 1):
        s = _rk4_step(s, dt, eps)
        if not np.all(np.isfinite(s)):
            bad = k
            break
        if k % every == 0:
            out[j] = s
            j += 1
    return out, bad


def integrate(ic: PhasePoint, dt: float, t_end: float, params: ModelParams = ModelParams(),
              every: int = 1) -> Trajectory:
    """Fixed-step RK4 over the equations of motion plus the two action integrals.

    The number of steps is round(t_end / dt); ``every`` thins the stored samples.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_end < dt:
        raise ValueError("t_end must be >= dt")
    n = int(round(t_end / dt))
    s0 = np.array([ic.x, ic.y, ic.px, ic.py, 0.0, 0.0])
    out, bad = _rk4(s0, float(dt), n, float(params.epsilon), int(every))
    if bad >= 0:
        raise IntegrationError(bad)
    t = dt * every * np.arange(out.shape[0])
    return Trajectory(dt, t, out[:, :4].copy(), out[:, 4].copy(), out[:, 5].copy(),
                      hamiltonian_value(ic, params))


def integrate_final(ic: PhasePoint, dt: float, t_end: float, params: ModelParams = ModelParams()) -> np.ndarray:
    """State (x, y, px, py, Sx, Sy) at exactly ``t_end``; the last step is shortened."""
    if not (dt > 0 and t_end >= 0):
        raise ValueError("need dt > 0 and t_end >= 0")
    n = int(np.floor(t_end / dt))
    s0 = np.array([ic.x, ic.y, ic.px, ic.py, 0.0, 0.0])
    out, bad = _rk4(s0, float(dt), n, float(params.epsilon), max(n, 1))
    if bad >= 0:
        raise IntegrationError(bad)
    s = out[-1]
    rest = t_end - n * dt
    if rest > 1e-15:
        s = _rk4_step(s, rest, float(params.epsilon))
    return s


ORBIT_NAMES = ("horizontal_vertical", "quadruple_loop", "bowtie", "square")


@dataclass(frozen=True)
class PeriodicOrbit:
    name: str
    ic: PhasePoint
    period: float
    maslov: int
    nd: int
    p_ratio: int
    n_values: tuple[int, ...]
    energy: float = 1.0
    # symmetry partners used to build A1 combinations (initial conditions at the same energy)
    partners: tuple[PhasePoint, ...] = ()
    action: float | None = None

    def __post_init__(self):
        if self.maslov < 0 or self.nd < 0 or self.p_ratio < 0:
            raise ValueError("maslov, nd and p_ratio must be non-negative")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def mu(self) -> int:
        return self.maslov

    def scaled(self, energy_prime: float) -> "PeriodicOrbit":
        """The similar orbit at another energy."""
        eta = similarity_factor(self.energy, energy_prime)

        def sc(p):
            return PhasePoint(eta * p.x, eta * p.y, eta ** 2 * p.px, eta ** 2 * p.py)

        return replace(self, ic=sc(self.ic), period=self.period / eta, energy=energy_prime,
                       partners=tuple(sc(p) for p in self.partners),
                       action=None if self.action is None else self.action * eta ** 3)


_SQ2 = math.sqrt(2.0)

# Orbit data at E = 1 exactly as tabulated (3-4 significant digits).
ROUNDED_ORBITS = {
    "horizontal_vertical": PeriodicOrbit(
        "horizontal_vertical", PhasePoint(0.0, 0.0, _SQ2, 0.0), 33.17, maslov=16, nd=0, p_ratio=0,
        n_values=(12, 14, 16, 18, 20, 22, 42, 47, 53, 58, 62),
        partners=(PhasePoint(0.0, 0.0, 0.0, _SQ2),)),
    "quadruple_loop": PeriodicOrbit(
        "quadruple_loop", PhasePoint(0.0, 2.028, 1.384, 0.0), 18.75, maslov=12, nd=0, p_ratio=4,
        n_values=(4, 5, 6, 7, 8, 9, 10)),
    "bowtie": PeriodicOrbit(
        "bowtie", PhasePoint(0.0, 1.655, 1.401, 0.0), 9.54, maslov=4, nd=0, p_ratio=2,
        n_values=(20, 22, 24),
        partners=(PhasePoint(1.655, 0.0, 0.0, 1.401),)),
    "square": PeriodicOrbit(
        "square", PhasePoint(0.0, 1.239, 1.410, 0.0), 7.84, maslov=4, nd=0, p_ratio=4,
        n_values=(3, 4, 5, 6, 7, 8)),
}


def _on_axis_ic(y0: float, energy: float, params: ModelParams) -> PhasePoint:
    ke = energy - float(potential_value(0.0, y0, params))
    if ke <= 0:
        raise ValueError(f"y0={y0} lies outside the energy shell")
    return PhasePoint(0.0, y0, math.sqrt(2.0 * ke), 0.0)


def refine_orbit(po: PeriodicOrbit, dt: float = DEFAULT_DT, params: ModelParams = ModelParams(),
                 tol: float = 1e-13) -> PeriodicOrbit:
    """Sharpen a tabulated orbit by symmetric shooting at fixed energy.

    Orbits launched from the y axis with py = 0 are symmetric under x -> -x
    and recross the y axis with py = 0 after half a period; we solve those two
    conditions for (y0, T). Orbits launched from the origin along an axis
    (horizontal/vertical) only need T, from x(T/2) = 0.
    """
    from scipy.optimize import least_squares

    ic = po.ic
    if ic.x == 0.0 and ic.y == 0.0:
        def resid(p):
            return [integrate_final(ic, dt, p[0] / 2, params)[0]]
        r = least_squares(resid, [po.period], bounds=([0.99 * po.period], [1.01 * po.period]),
                          xtol=tol, ftol=tol, gtol=tol)
        return replace(po, period=float(r.x[0]), action=None)
    if ic.x != 0.0 or ic.py != 0.0:
        raise ValueError("refinement needs an initial condition on the y axis with py = 0")
    energy = po.energy

    def resid(p):
        e = integrate_final(_on_axis_ic(p[0], energy, params), dt, p[1] / 2, params)
        return [e[0], e[3]]

    lo = [ic.y - 0.01, 0.99 * po.period]
    hi = [ic.y + 0.01, 1.01 * po.period]
    r = least_squares(resid, [ic.y, po.period], bounds=(lo, hi), xtol=tol, ftol=tol, gtol=tol,
                      x_scale=[1e-3, 1e-2])
    y0, period = (float(v) for v in r.x)
    new_ic = _on_axis_ic(y0, energy, params)
    partners = tuple(PhasePoint(new_ic.y, 0.0, 0.0, new_ic.px) for _ in po.partners)
    return replace(po, ic=new_ic, period=period, partners=partners, action=None)


# Refined with refine_orbit (dt = 1e-4); every value rounds to its rounded counterpart.
def _refined(name, y0, px, period):
    po = ROUNDED_ORBITS[name]
    if y0 == 0.0:
        return replace(po, period=period)
    partners = tuple(PhasePoint(y0, 0.0, 0.0, px) for _ in po.partners)
    return replace(po, ic=PhasePoint(0.0, y0, px, 0.0), period=period, partners=partners)


# Output of refine_orbit at E = 1, dt = 1e-4; each value rounds to its rounded counterpart.
BUILTIN_ORBITS = {
    "horizontal_vertical": _refined("horizontal_vertical", 0.0, _SQ2, 33.16669611045491),
    "quadruple_loop": _refined("quadruple_loop", 2.028201657242946, 1.3839766596561245, 18.75137918742783),
    "bowtie": _refined("bowtie", 1.6546663900471525, 1.4008993349836016, 9.53503754891421),
    "square": _refined("square", 1.238737920803223, 1.4100450290628554, 7.842576243138914),
}


def get_orbit(name: str) -> PeriodicOrbit:
    key = name.replace("-", "_").lower()
    if key not in BUILTIN_ORBITS:
        raise KeyError(f"unknown orbit {name!r}; choose from {', '.join(ORBIT_NAMES)}")
    return BUILTIN_ORBITS[key]


def closure_defect(po: PeriodicOrbit, dt: float = DEFAULT_DT, params: ModelParams = ModelParams(),
                   periods: int = 1) -> float:
    """Phase-space distance between the initial condition and the state after the period."""
    end = integrate_final(po.ic, dt, periods * po.period, params)
    return float(np.linalg.norm(end[:4] - po.ic.as_array()))


def orbit_action(po: PeriodicOrbit, dt: float = DEFAULT_DT, params: ModelParams = ModelParams()) -> float:
    """S0 = Sx(T) + Sy(T) accumulated over one period."""
    end = integrate_final(po.ic, dt, po.period, params)
    return float(end[4] + end[5])


def with_measured_action(po: PeriodicOrbit, dt: float = DEFAULT_DT,
                         params: ModelParams = ModelParams()) -> PeriodicOrbit:
    if po.action is not None:
        return po
    return replace(po, action=orbit_action(po, dt, params))


def bs_energy(action_at_unit_energy: float, n, p_ratio: int, maslov: int, nd: int,
              params: ModelParams = ModelParams()):
    """eps_n = [(2 pi hbar / S0) (P n + mu/4 + P ND/2)]^(4/3) with S0 taken at E = 1."""
    n = np.asarray(n, dtype=float)
    phase = p_ratio * n + maslov / 4.0 + p_ratio * nd / 2.0
    return (2 * np.pi * params.hbar / action_at_unit_energy * phase) ** (4.0 / 3.0)


def bs_energies(po: PeriodicOrbit, n_values, params: ModelParams = ModelParams(),
                dt: float = DEFAULT_DT) -> list[float]:
    n_values = list(n_values)
    if not n_values:
        return []
    po = with_measured_action(po.scaled(1.0) if po.energy != 1.0 else po, dt, params)
    return [float(e) for e in bs_energy(po.action, n_values, po.p_ratio, po.maslov, po.nd, params)]


def ehrenfest_time(energy: float, params: ModelParams = ModelParams()) -> float:
    """t_E = ln(A / hbar) / (2 lambda) with lambda and A from their E-power laws."""
    if not energy > 0:
        raise ValueError("energy must be positive")
    area = params.poincare_area(energy)
    if area <= params.hbar:
        raise ValueError(f"Poincare area {area:.4g} <= hbar: Ehrenfest time undefined")
    return math.log(area / params.hbar) / (2.0 * params.lyapunov(energy))
