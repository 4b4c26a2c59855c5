"""Reference eigenpairs by matrix-free diagonalization of the grid Hamiltonian."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .domain import Wavefunction, _check_grid, normalize, project_a1
from .propagator import PropagatorPlan, apply_hamiltonian_array


class OracleConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EigPair:
    energy: float
    state: Wavefunction
    residual: float


def apply_hamiltonian(psi: Wavefunction, plan: PropagatorPlan) -> Wavefunction:
    _check_grid(psi.grid, plan.grid)
    return psi.with_amplitudes(apply_hamiltonian_array(psi.amplitudes, plan), label="H" + psi.label)


def residual_norm(psi: Wavefunction, energy: float, plan: PropagatorPlan) -> float:
    """||H psi - E psi|| / ||psi||."""
    a = psi.amplitudes
    r = apply_hamiltonian_array(a, plan) - energy * a
    return float(np.linalg.norm(r) / np.linalg.norm(a))


def lowest_eigenpairs(plan: PropagatorPlan, k: int, symmetry_filter: str | None = None,
                      tol: float = 1e-8, max_matvecs: int = 5000, seed: int = 0,
                      max_rounds: int = 8) -> list[EigPair]:
    """k lowest eigenpairs of the grid Hamiltonian.

    Uses implicitly restarted Lanczos on the FFT matvec. With
    ``symmetry_filter="A1"`` the operator is restricted to the totally
    symmetric sector by sandwiching it between A1 projectors and shifting the
    complement far above the spectrum of interest.

    A single Krylov sequence can miss members of an exactly degenerate
    eigenspace, so the solve is repeated with the vectors found so far
    shifted out of the way until no further eigenvalue appears below the
    current k-th one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grid = plan.grid
    shape = grid.shape
    a1 = symmetry_filter is not None and symmetry_filter.upper() == "A1"
    if symmetry_filter is not None and not a1:
        raise ValueError(f"unsupported symmetry filter {symmetry_filter!r}")
    if a1 and not grid.is_square_symmetric():
        raise ValueError("A1 filtering needs a square grid centred on the origin")
    shift = 2.0 * float(plan.kinetic.max() + plan.potential.max())
    n = grid.size
    if k >= n - 1:
        raise ValueError(f"k={k} is too large for a grid of {n} points")

    def matvec(v):
        a = v.reshape(shape)
        if a1:
            p = project_a1(a)
            out = project_a1(apply_hamiltonian_array(p, plan)) + shift * (a - p)
        else:
            out = apply_hamiltonian_array(a, plan)
        return out.ravel().real

    rng = np.random.default_rng(seed)
    vals = np.empty(0)
    vecs = np.empty((n, 0))
    for _ in range(max_rounds):
        V = vecs

        def deflated(v, V=V):
            # (1 - VV^T) H (1 - VV^T) + shift VV^T, real-symmetric
            c = V.T @ v
            w = v - V @ c
            hw = matvec(w)
            return hw - V @ (V.T @ hw) + shift * (V @ c)

        # the Hamiltonian is real-symmetric on real fields: work in real arithmetic
        op = LinearOperator((n, n), matvec=deflated, dtype=np.float64)
        v0 = rng.standard_normal(n)
        if a1:
            v0 = project_a1(v0.reshape(shape)).ravel()
        v0 -= V @ (V.T @ v0)
        ncv = min(n - 1, max(2 * k + 1, 40))
        try:
            w, u = eigsh(op, k=k, which="SA", tol=tol, maxiter=max_matvecs, v0=v0, ncv=ncv)
        except ArpackNoConvergence as exc:
            raise OracleConvergenceError(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {k} pairs after {max_matvecs} restarts") from exc
        if vals.size == k and not np.any(w < vals[-1] - max(tol, 1e-12) * max(1.0, abs(vals[-1]))):
            break
        new = w < shift * 0.5
        merged = np.concatenate([vals, w[new]])
        basis = np.hstack([vecs, u[:, new]])
        order = np.argsort(merged)[:k]
        # re-orthonormalize within the kept set (degenerate members may mix)
        q, _ = np.linalg.qr(basis[:, order])
        vals, vecs = merged[order], q
    else:
        raise OracleConvergenceError(f"eigenspace search did not settle in {max_rounds} rounds")
    # Rayleigh-Ritz on the final basis separates any mixed vectors
    hv = np.column_stack([matvec(vecs[:, j]) for j in range(k)])
    ev, rot = np.linalg.eigh(vecs.T @ hv)
    vecs = vecs @ rot
    pairs = []
    for j in range(k):
        a = vecs[:, j].reshape(shape).astype(np.complex128)
        psi = normalize(Wavefunction(grid, a, f"oracle{j}"))
        # fix the sign so the largest component is positive
        imax = np.argmax(np.abs(psi.amplitudes))
        psi = psi * np.sign(psi.amplitudes.flat[imax].real)
        pairs.append(EigPair(float(ev[j]), psi, residual_norm(psi, float(ev[j]), plan)))
    return pairs
