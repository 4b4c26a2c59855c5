import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qscar.config import RunConfig, SpectralOptions, Times, TubeOptions
from qscar.domain import Grid, Wavefunction, WaveSeries, inner_product, normalize, read_series
from qscar.oracle import lowest_eigenpairs
from qscar.potential import ModelParams
from qscar.propagator import PropagatorPlan, propagate
from qscar.reservoir import ReservoirConfig
from qscar.spectral import (Correlation, _frame_mse, Spectrum, correlation, eigen_pipeline, extract_state,
                            extract_states, find_peaks, low_res_spectrum, main_lobe_width, scar_pipeline,
                            spectrum)
from qscar.wavepacket import GaussianSpec

G = Grid.square(16, 4.0)
ENERGIES = np.array([1.3, 2.9, 4.4])


def modes(n=3, seed=0, real=True):
    # orthonormal fields on G (unit norm with the cell-area measure)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((G.size, n))
    if not real:
        a = a + 1j * rng.standard_normal((G.size, n))
    q, _ = np.linalg.qr(a)
    return (q.T / np.sqrt(G.cell_area)).reshape((n,) + G.shape).astype(np.complex128)


def superposition(coef, phi, t):
    # psi(t) = sum_k c_k phi_k exp(-i E_k t)
    ph = np.exp(-1j * np.outer(t, ENERGIES[:len(coef)])) * coef
    return np.einsum("tk,kij->tij", ph, phi)


def series(coef, phi, n=2000, dt=0.02, t0=0.0):
    t = t0 + dt * np.arange(n)
    return WaveSeries(G, dt, superposition(np.asarray(coef), phi, t), t0)


COEF = np.array([0.6, 0.5j, np.sqrt(1 - 0.36 - 0.25)])


def test_correlation_stationary_and_phase():
    phi = modes()
    psi0 = Wavefunction(G, phi[0])
    c = correlation(WaveSeries(G, 0.1, np.repeat(phi[:1], 5, axis=0)), psi0)
    assert np.allclose(c.values, 1.0)
    c = correlation(series([1.0], phi[:1], 50), psi0)
    assert np.allclose(c.values, np.exp(1j * ENERGIES[0] * c.times))


def test_correlation_sign_on_oracle_eigenstate():
    plan = PropagatorPlan(Grid.square(32, 6.0), 0.005, ModelParams())
    e0 = lowest_eigenpairs(plan, 1)[0]
    s = propagate(e0.state, 200, plan, 20)
    c = correlation(s, e0.state)
    slope = np.polyfit(c.times, np.unwrap(np.angle(c.values)), 1)[0]
    # split-operator phase error is O(dt^2)
    assert slope == pytest.approx(e0.energy, rel=1e-5)
    assert np.allclose(np.abs(c.values), 1, atol=1e-9)


def test_correlation_of_segments_equals_whole():
    phi = modes()
    whole = series(COEF, phi, 100)
    parts = [WaveSeries(G, whole.dt, whole.frames[:40]), WaveSeries(G, whole.dt, whole.frames[40:], 40 * whole.dt)]
    psi0 = Wavefunction(G, whole.frames[0])
    assert np.allclose(correlation(parts, psi0).values, correlation(whole, psi0).values, atol=1e-14)
    with pytest.raises(ValueError):
        correlation([parts[1], parts[0]], psi0)


def test_single_and_two_tones():
    t = 0.02 * np.arange(3000)
    e = np.linspace(0, 6, 6001)
    s = spectrum(Correlation(0.02, np.exp(1j * 2.0 * t)), e)
    p = find_peaks(s)
    main = p[int(np.argmax(np.interp(p, s.energies, s.magnitude)))]
    assert abs(main - 2.0) < s.bin_width
    c = Correlation(0.02, 0.7 * np.exp(1j * 1.5 * t) + 0.3 * np.exp(1j * 3.7 * t))
    for window, prom in (("none", 0.3), ("hann", 0.05)):
        p = find_peaks(spectrum(c, e, window, symmetric=True), prom)
        assert len(p) == 2 and np.allclose(p, [1.5, 3.7], atol=2e-3)


def test_resolution_scales_with_duration():
    e = np.linspace(1, 3, 8001)
    w = []
    for n in (1000, 2000):
        t = 0.02 * np.arange(n)
        w.append(main_lobe_width(spectrum(Correlation(0.02, np.exp(2j * t)), e), 2.0))
    assert w[1] / w[0] == pytest.approx(0.5, rel=0.02)


def test_symmetric_spectrum_is_real_hermitian_extension():
    rng = np.random.default_rng(2)
    vals = rng.standard_normal(40) + 1j * rng.standard_normal(40)
    vals[0] = 1.0
    c = Correlation(0.1, vals)
    e = np.linspace(-3, 3, 61)
    s = spectrum(c, e, symmetric=True)
    # explicit sum over t_k in [-T, T] with C(-t) = conj(C(t))
    t = c.times
    full_t = np.concatenate([-t[:0:-1], t])
    full_c = np.concatenate([vals[:0:-1].conj(), vals])
    direct = (np.exp(-1j * np.outer(e, full_t)) @ full_c) * 0.1
    assert np.allclose(s.amplitude, direct, atol=1e-12)
    assert np.all(s.amplitude.imag == 0)


def test_low_res_is_wider_and_reduces_to_full():
    t = 0.02 * np.arange(2000)
    c = Correlation(0.02, np.exp(1j * 2.0 * t))
    e = np.linspace(0, 4, 4001)
    full = spectrum(c, e, "hann", symmetric=True)
    low = low_res_spectrum(c, e, 8.0, "hann")
    assert main_lobe_width(low, 2.0) > 4 * main_lobe_width(full, 2.0)
    same = low_res_spectrum(c, e, c.duration, "hann")
    assert np.max(np.abs(same.amplitude - full.amplitude)) <= 1e-10
    with pytest.raises(ValueError):
        low_res_spectrum(c, e, c.duration + 1.0)


def test_parseval_over_one_period():
    rng = np.random.default_rng(3)
    dt = 0.05
    vals = rng.standard_normal(200) + 1j * rng.standard_normal(200)
    period = 2 * np.pi / dt
    e = np.linspace(0, period, 4000, endpoint=False)
    s = spectrum(Correlation(dt, vals), e)
    lhs = np.sum(s.magnitude ** 2) * (e[1] - e[0])
    rhs = 2 * np.pi * dt * np.sum(np.abs(vals) ** 2)
    assert lhs == pytest.approx(rhs, rel=0.05)


def test_find_peaks_degenerate():
    e = np.linspace(0, 1, 50)
    assert find_peaks(Spectrum(e, np.ones(50), 1.0)) == []
    assert find_peaks(Spectrum(e, np.zeros(50), 1.0)) == []
    assert find_peaks(Spectrum(e[:2], np.ones(2), 1.0)) == []


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_find_peaks_scale_invariant(a, seed):
    t = 0.05 * np.arange(400)
    w = np.random.default_rng(seed).uniform(0.5, 3.5, 3)
    c = Correlation(0.05, np.exp(1j * np.outer(t, w)).sum(axis=1))
    s = spectrum(c, np.linspace(0, 4, 801), "hann")
    assert find_peaks(s.scaled(a)) == pytest.approx(find_peaks(s), abs=1e-9)


def test_spectrum_errors():
    c = Correlation(0.1, np.ones(5))
    with pytest.raises(ValueError):
        spectrum(c, [])
    with pytest.raises(ValueError):
        spectrum(c, [1.0], window="kaiser")
    with pytest.raises(ValueError):
        spectrum(Correlation(0.1, np.ones(1)), [1.0])
    with pytest.raises(ValueError):
        spectrum(Correlation(0.1, np.ones(5), t0=1.0), [1.0], symmetric=True)
    with pytest.raises(ValueError):
        Correlation(0.0, np.ones(3))


def test_extract_eigenstate():
    phi = modes(real=False)
    s = series(COEF, phi)
    for window, tol in (("none", 0.995), ("hann", 0.9999)):
        for k in range(3):
            psi = extract_state(s, ENERGIES[k], window=window)
            assert abs(inner_product(Wavefunction(G, phi[k]), psi)) >= tol


def test_extract_detuned_is_small():
    phi = modes()
    s = series(COEF, phi)
    on = extract_state(s, ENERGIES[0], window="hann", normalized=False).norm()
    off = extract_state(s, 0.5 * (ENERGIES[0] + ENERGIES[1]), window="hann", normalized=False).norm()
    assert on >= 10 * off


def test_extract_linear_and_batched():
    phi = modes()
    a, b = series(COEF, phi), series(COEF[::-1], phi)
    mix = WaveSeries(G, a.dt, 2.0 * a.frames - 1j * b.frames)
    kw = dict(window="hann", normalized=False)
    lhs = extract_state(mix, 2.2, **kw).amplitudes
    rhs = 2.0 * extract_state(a, 2.2, **kw).amplitudes - 1j * extract_state(b, 2.2, **kw).amplitudes
    assert np.allclose(lhs, rhs, atol=1e-12)
    many = extract_states(a, [1.0, 2.2], **kw)
    assert np.allclose(many[1].amplitudes, extract_state(a, 2.2, **kw).amplitudes, atol=1e-12)
    with pytest.raises(ValueError):
        extract_state(a, float("nan"))
    with pytest.raises(ValueError):
        extract_state(a, 1.0, t_range=(100.0, 200.0))


def test_extract_with_backward_series():
    # real modes: psi(-t) = conj(chi(t)) with chi(t) = U(t) conj(psi_0)
    phi = modes()
    fwd = series(COEF, phi, 600)
    back = series(COEF.conj(), phi, 600)
    T = fwd.times[-1]
    psi = extract_state(fwd, ENERGIES[1], (0.0, T), "hann", backward=back, normalized=False)
    t = fwd.times
    full_t = np.concatenate([-t[:0:-1], t])
    frames = superposition(COEF, phi, full_t)
    w = 0.5 * (1 + np.cos(np.pi * full_t / T)) * fwd.dt
    direct = np.einsum("t,tij->ij", w * np.exp(1j * ENERGIES[1] * full_t), frames)
    assert np.allclose(psi.amplitudes, direct, atol=1e-10)
    assert abs(inner_product(Wavefunction(G, phi[1]), normalize(psi))) >= 0.9999
    with pytest.raises(ValueError):
        extract_state(fwd, 1.0, (0.0, T), backward=WaveSeries(G, fwd.dt, back.frames[:10]))


def tiny_eigen_config(**kw):
    return RunConfig(
        name="tiny", model=ModelParams(), grid=Grid.square(32, 8.0),
        times=Times(0.01, 60, 40, 5),
        reservoir=ReservoirConfig(n_nodes=100, density=0.1, t_min=20, leak=0.5, ridge=1e-4,
                                  split_first=1.0, feedback_scale=0.1),
        packet=GaussianSpec(0.0, 0.0, 0.5, 0.5, 1.0, 1.0),
        spectral=SpectralOptions(e_max=4.0, window="hann", n_energies=801, **kw), energy=1.0)


def test_eigen_pipeline_tiny(tmp_path):
    r = eigen_pipeline(tiny_eigen_config(), use_rc=True, reference=True, workdir=tmp_path / "w")
    assert len(r.correlation) == 101 and r.correlation.values[0] == pytest.approx(1.0)
    assert r.energies.size >= 1 and len(r.states) == r.energies.size
    assert set(r.reference) >= {"energies", "frame_mse", "frame_mse_max", "energy_sq_error", "state_mse"}
    assert r.reference["frame_mse"].size == 40
    assert {"fft_s", "rc_train_s", "rc_run_s", "analysis_s"} <= set(r.timings)
    assert read_series(tmp_path / "w" / "rc.qwf").frames.shape == (40, 32, 32)
    files = r.write(tmp_path / "out")
    assert all(p.endswith((".csv", ".qwf")) for p in files)
    assert (tmp_path / "out" / "state0.qwf").exists()
    fft = eigen_pipeline(tiny_eigen_config(), use_rc=False, max_frames=80)
    assert len(fft.correlation) == 81 and fft.reference is None and fft.rc_diagnostics == {}


def test_scar_pipeline_tiny(tmp_path):
    cfg = RunConfig(
        name="tiny", model=ModelParams(), grid=Grid.square(64, 9.0), times=Times(0.0005, 320, 320, 10),
        reservoir=ReservoirConfig(n_nodes=100, density=0.1, t_min=20, leak=0.3, ridge=0.1,
                                  split_first=1.0, feedback_scale=0.1),
        tube=TubeOptions("quadruple_loop", (4,)), spectral=SpectralOptions(window="hann", n_energies=1001))
    r = scar_pipeline(cfg, use_rc=False)
    s = r.scars[0]
    assert s.n == 4 and s.epsilon_n == pytest.approx(8.040481, abs=1e-5)
    assert 0 < s.t_e <= 3.2 and np.isfinite(s.energy)
    assert s.low_res_width > s.full_width
    assert 0 <= s.mass_near_orbit <= 1
    assert s.display.norm() == pytest.approx(1.0)
    r.write(tmp_path)
    assert (tmp_path / "bs_compare.csv").read_text().startswith("n,epsilon_n,E_RC,rel_diff")
    assert (tmp_path / "scar_n4.qwf").exists()
    rc = scar_pipeline(cfg, use_rc=True)
    assert "n4" in rc.rc_diagnostics and np.isfinite(rc.scars[0].energy)


def test_frame_mse_chunking():
    phi = modes()
    a, b = series(COEF, phi, 300), series(COEF[::-1], phi, 300)
    full = np.mean(np.abs(a.frames - b.frames) ** 2, axis=(1, 2))
    assert np.allclose(_frame_mse(a, b, 250, chunk=64), full[:250], rtol=1e-14)
    assert _frame_mse(a, b, 1000).size == 300
