"""Acceptance gate: criteria 1-10 at their stated tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary and
also to stdout as it runs. The E1 and scar runs take tens of minutes.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from qscar.classical import ORBIT_NAMES, closure_defect, get_orbit, integrate
from qscar.config import RunConfig, preset
from qscar.domain import Grid, Wavefunction, WaveSeries, normalize
from qscar.oracle import lowest_eigenpairs
from qscar.propagator import PropagatorPlan, energy_expectation, propagate, step_array
from qscar.reservoir import collect_states, fit_readout, init, spectral_radius
from qscar.spectral import eigen_pipeline, scar_pipeline, speed_benchmark
from qscar.wavepacket import gaussian

E1_TARGETS = np.array([0.56323, 1.8848, 2.8638])
E1_FRAMES = 3000


def record(k, ok, detail):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def nearest(values, target):
    values = np.asarray(values)
    return float(values[np.argmin(np.abs(values - target))]) if values.size else float("nan")


@pytest.fixture(scope="module")
def e1_fft():
    t = time.perf_counter()
    r = eigen_pipeline(preset("E1"), use_rc=False, max_frames=E1_FRAMES)
    return r, time.perf_counter() - t


@pytest.fixture(scope="module")
def e1_rc():
    d = preset("E1").to_dict()
    d["reservoir"]["renormalize"] = False
    return eigen_pipeline(RunConfig.from_dict(d), use_rc=True, reference=True)


@pytest.fixture(scope="module")
def quad():
    return scar_pipeline(preset("quadruple_loop"), use_rc=True, n_values=range(4, 9))


@pytest.fixture(scope="module")
def square():
    return scar_pipeline(preset("square"), use_rc=True, n_values=range(3, 7))


def test_criterion_01_e1_spectrum(e1_fft):
    r, wall = e1_fft
    found = np.array([nearest(r.energies, e) for e in E1_TARGETS])
    err = np.abs(found - E1_TARGETS)
    ok = bool(np.all(err <= 5e-3) and wall <= 600)
    record(1, ok, f"peaks {np.round(found, 5).tolist()} |dE| max {err.max():.2e} (<= 5e-3), "
                  f"runtime {wall:.0f} s (<= 600)")


def test_criterion_02_oracle(e1_fft):
    r, _ = e1_fft
    cfg = preset("E1")
    pairs = lowest_eigenpairs(PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model), 3, symmetry_filter="A1")
    oracle = np.array([p.energy for p in pairs])
    found = np.array([nearest(r.energies, e) for e in oracle])
    err = np.abs(found - oracle)
    tol = np.array([1e-3, 5e-3, 5e-3])
    record(2, bool(np.all(err <= tol)),
           f"oracle A1 {np.round(oracle, 5).tolist()} vs peaks, |dE| {np.array2string(err, precision=2)} "
           f"(<= 1e-3, 5e-3, 5e-3)")


def test_criterion_03_rc_fidelity(e1_rc):
    ref = e1_rc.reference
    mse = ref["frame_mse"]
    rc = np.array([nearest(e1_rc.energies, e) for e in E1_TARGETS])
    fft = np.array([nearest(ref["energies"], e) for e in E1_TARGETS])
    sq = (rc - fft) ** 2
    ok = bool(mse.size == 1000 and mse.max() <= 1e-4 and np.all(sq <= 1e-6))
    record(3, ok, f"frame MSE max over {mse.size} free-run frames {mse.max():.2e} (<= 1e-4); "
                  f"energy sq error {np.array2string(sq, precision=2)} (<= 1e-6)")


def test_criterion_04_residuals(e1_fft, e1_rc):
    res = np.concatenate([e1_fft[0].residuals, e1_rc.residuals])
    record(4, bool(res.size and res.max() <= 5e-2),
           f"{res.size} extracted states, max residual {res.max():.2e} (<= 5e-2)")


def test_criterion_05_scars_vs_bs(quad, square):
    rows = [(o.orbit, s.n, s.rel_diff) for o in (quad, square) for s in o.scars]
    worst = max(abs(d) for _, _, d in rows)
    ok = len(rows) == 9 and all(np.isfinite(d) and abs(d) <= 0.05 for _, _, d in rows)
    detail = ", ".join(f"{o[:4]} n={n}: {d:+.3f}" for o, n, d in rows)
    record(5, ok, f"max |rel diff| {worst:.3f} (<= 0.05); {detail}")


def test_criterion_06_orbits():
    out = []
    for name in ORBIT_NAMES:
        po = get_orbit(name)
        e = integrate(po.ic, 1e-4, po.period).energies()
        out.append((name, closure_defect(po, 1e-4), float(np.max(np.abs(e - e[0])) / abs(e[0]))))
    ok = all(c <= 1e-3 and d <= 1e-8 for _, c, d in out)
    record(6, ok, "; ".join(f"{n}: closure {c:.1e} drift {d:.1e}" for n, c, d in out)
           + " (<= 1e-3, 1e-8)")


def test_criterion_07_low_vs_full_resolution(quad):
    ratios = [s.low_res_width / s.full_width for s in quad.scars]
    ok = bool(len(ratios) == 5 and min(ratios) >= 2.0)
    record(7, ok, f"low/full main-lobe width ratios {np.round(ratios, 2).tolist()} (>= 2)")


def test_criterion_08_propagator():
    cfg = preset("E1")
    plan = PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model)
    psi = gaussian(cfg.packet, cfg.grid, cfg.model)
    e0 = energy_expectation(psi, plan)
    a = psi.amplitudes
    drift_e = 0.0
    for k in range(10_000):
        a = step_array(a, plan)
        if k % 500 == 499:
            drift_e = max(drift_e, abs(energy_expectation(psi.with_amplitudes(a), plan) - e0) / e0)
    drift_n = abs(psi.with_amplitudes(a).norm() - 1)
    g = Grid.square(32, 6.0)
    p32 = PropagatorPlan(g, 0.01)
    rng = np.random.default_rng(0)
    u, v = (normalize(Wavefunction(g, rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)))
            for _ in range(2))
    c = 0.3 - 1.7j
    lin = np.max(np.abs(propagate(c * u + v, 100, p32).frames[-1]
                        - c * propagate(u, 100, p32).frames[-1] - propagate(v, 100, p32).frames[-1]))
    ok = drift_n <= 1e-8 and drift_e <= 1e-6 and lin <= 1e-10
    record(8, ok, f"norm drift {drift_n:.1e} (<= 1e-8), energy drift {drift_e:.1e} (<= 1e-6), "
                  f"linearity {lin:.1e} (<= 1e-10)")


def test_criterion_09_reservoir():
    cfg = preset("E1").reservoir
    m = init(cfg, 64)
    rho = float(np.max(np.abs(np.linalg.eigvals(m.W.toarray()))))
    rng = np.random.default_rng(5)
    grad = 0.0
    for _ in range(20):
        X = rng.standard_normal((30, 10)) + 1j * rng.standard_normal((30, 10))
        Y = rng.standard_normal((30, 4)) + 1j * rng.standard_normal((30, 4))
        B = fit_readout(X, Y, 1e-2).T
        grad = max(grad, float(np.max(np.abs(2 * X.conj().T @ (X @ B - Y) + 2e-2 * B))))
    # twin states driven by the same teacher sequence
    g = Grid.square(8, 4.0)
    t = 0.1 * np.arange(cfg.t_min + 2)
    modes = rng.standard_normal((2,) + g.shape)
    frames = np.exp(-1j * 0.9 * t)[:, None, None] * modes[0] + np.exp(-2.3j * t)[:, None, None] * modes[1]
    frames /= np.sqrt(np.sum(np.abs(frames) ** 2, axis=(1, 2)) * g.cell_area)[:, None, None]
    teach = WaveSeries(g, 0.1, frames)
    x0 = rng.uniform(-1, 1, m.N) + 1j * rng.uniform(-1, 1, m.N)
    _, _, xa = collect_states(m, teach, state=x0)
    _, _, xb = collect_states(m, teach, state=np.zeros(m.N))
    echo = float(np.linalg.norm(xa - xb))
    ok = abs(rho - 0.5) <= 1e-6 and grad <= 1e-8 and echo <= 1e-8
    record(9, ok, f"spectral radius {rho:.9f} (0.5 +- 1e-6, ARPACK estimate {spectral_radius(m.W):.9f}), "
                  f"ridge gradient {grad:.1e} (<= 1e-8), echo distance after {len(teach)} teacher frames {echo:.1e} (<= 1e-8)")


def test_criterion_10_speed():
    # one free-run step advances one stored frame, which the FFT reaches in
    # `stride` steps; both paths keep their frames in memory
    cfg = preset("E1")
    b = speed_benchmark(cfg, gaussian(cfg.packet, cfg.grid, cfg.model), steps=500)
    record(10, b["rc_per_step_s"] < b["fft_per_frame_s"],
           f"RC free-run {b['rc_per_step_s'] * 1e3:.2f} ms/step vs FFT {b['fft_per_frame_s'] * 1e3:.2f} ms "
           f"per frame ({b['stride']} steps of {b['fft_per_step_s'] * 1e3:.3f} ms) at 128^2, N={b['n_nodes']}, "
           f"best of {b['repeats']}; RC state update {b['rc_state_update_s'] * 1e3:.2f} ms + decode "
           f"{b['rc_decode_s'] * 1e3:.2f} ms: "
           f"ratio {b['ratio_rc_to_fft_frame']:.2f} (RC step / single FFT step {b['ratio_rc_to_fft_step']:.1f})")
