"""Correlation functions, energy spectra, peak finding and state extraction."""
from __future__ import annotations

import csv
import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import reservoir
from .domain import Wavefunction, WaveSeries, _check_grid, normalize, write_wavefunction
from .oracle import residual_norm
from .propagator import PropagatorPlan, propagate

WINDOWS = ("none", "hann")
# distance from the orbit within which scar mass is counted
SCAR_TUBE_RADIUS = 1.5


@dataclass(frozen=True, eq=False)
class Correlation:
    """C(t_k) = <psi(t_k)|psi_0> sampled at t0 + k dt."""

    dt: float
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128).ravel()
        object.__setattr__(self, "values", v)
        if not self.dt > 0:
            raise ValueError("correlation dt must be positive")

    def __len__(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def duration(self) -> float:
        return self.dt * (len(self) - 1)

    def truncated(self, t_max: float) -> "Correlation":
        k = int(np.floor((t_max - self.t0) / self.dt + 1e-9)) + 1
        return Correlation(self.dt, self.values[:k], self.t0)

    def concatenate(self, other: "Correlation") -> "Correlation":
        return Correlation(self.dt, np.concatenate([self.values, other.values]), self.t0)


@dataclass(frozen=True, eq=False)
class Spectrum:
    energies: np.ndarray
    amplitude: np.ndarray
    resolution_time: float

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        a = np.asarray(self.amplitude, dtype=np.complex128)
        if e.shape != a.shape or e.ndim != 1:
            raise ValueError("energies and amplitude must be matching 1-D arrays")
        if not np.all(np.isfinite(a)):
            raise ValueError("spectrum amplitude must be finite")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "amplitude", a)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.amplitude)

    @property
    def bin_width(self) -> float:
        return float(self.energies[1] - self.energies[0]) if self.energies.size > 1 else 0.0

    def scaled(self, factor: float) -> "Spectrum":
        return Spectrum(self.energies, factor * self.amplitude, self.resolution_time)


def default_energy_grid(e_packet: float, n: int = 4096) -> np.ndarray:
    return np.linspace(0.0, 2.0 * e_packet, n)


def _as_segments(series) -> list[WaveSeries]:
    """A series or a time-ordered sequence of contiguous series segments."""
    segs = [series] if isinstance(series, WaveSeries) else list(series)
    if not segs:
        raise ValueError("no series given")
    for a, b in zip(segs, segs[1:]):
        _check_grid(a.grid, b.grid)
        if not np.isclose(a.dt, b.dt, rtol=1e-12):
            raise ValueError("segments must share the frame spacing")
        if len(a) and not np.isclose(b.t0, a.t0 + a.dt * len(a), rtol=1e-9, atol=1e-9 * a.dt):
            raise ValueError("segments must be contiguous in time")
    return segs


def correlation(series, psi0: Wavefunction, chunk: int = 256) -> Correlation:
    """C(t_k) = <psi(t_k)|psi_0>, conjugating the evolved state.

    ``series`` may be a list of contiguous segments. Frames are read in
    chunks so memory-mapped series stay on disk.
    """
    segs = _as_segments(series)
    ref = psi0.amplitudes.ravel()
    parts = []
    for seg in segs:
        _check_grid(seg.grid, psi0.grid)
        flat = seg.frames.reshape(len(seg), -1)
        out = np.empty(len(seg), dtype=np.complex128)
        for i in range(0, len(seg), chunk):
            out[i:i + chunk] = np.asarray(flat[i:i + chunk]).conj() @ ref
        parts.append(out * seg.grid.cell_area)
    return Correlation(segs[0].dt, np.concatenate(parts), segs[0].t0)


def _window(n: int, kind: str) -> np.ndarray:
    """Half Hann taper: weight 1 at the first sample (t=0), 0 at the last."""
    if kind not in WINDOWS:
        raise ValueError(f"window must be one of {WINDOWS}")
    if kind == "none" or n < 2:
        return np.ones(n)
    return 0.5 * (1 + np.cos(np.pi * np.arange(n) / (n - 1)))


def _transform(t: np.ndarray, w: np.ndarray, values: np.ndarray, e_grid: np.ndarray,
               hbar: float, sign: float, chunk: int = 512) -> np.ndarray:
    out = np.empty(e_grid.size, dtype=np.complex128)
    wv = w * values
    for i in range(0, e_grid.size, chunk):
        e = e_grid[i:i + chunk]
        out[i:i + chunk] = np.exp(sign * 1j * np.outer(e, t) / hbar) @ wv
    return out


def spectrum(c: Correlation, e_grid, window: str = "none", symmetric: bool = False,
             hbar: float = 1.0) -> Spectrum:
    """I(E) = sum_k C(t_k) exp(-i E t_k / hbar) dt by the rectangle rule.

    With ``symmetric`` the negative-time half is filled in from
    C(-t) = conj(C(t)), so the transform runs over [-T, T] and is real.
    The Hann window decays from 1 at t=0 (or the symmetric centre) to 0 at T.
    """
    e_grid = np.asarray(e_grid, dtype=float)
    if e_grid.size == 0:
        raise ValueError("empty energy grid")
    if len(c) < 2:
        raise ValueError("need at least two correlation samples")
    w = _window(len(c), window) * c.dt
    t = c.times
    if symmetric:
        if abs(c.t0) > 1e-12:
            raise ValueError("the Hermitian extension needs a correlation starting at t=0")
        # C(t) e^{-iEt} + conj(C(t)) e^{iEt} = 2 Re[C(t) e^{-iEt}]; t=0 counted once
        w = w.copy()
        w[0] *= 0.5
        amp = 2.0 * _transform(t, w, c.values, e_grid, hbar, -1.0).real + 0j
        return Spectrum(e_grid, amp, c.duration)
    amp = _transform(t, w, c.values, e_grid, hbar, -1.0)
    return Spectrum(e_grid, amp, c.duration)


def low_res_spectrum(c: Correlation, e_grid, t_e: float, window: str = "none",
                     hbar: float = 1.0) -> Spectrum:
    """Transform over [-t_E, t_E] using C(-t) = conj(C(t))."""
    if t_e > c.duration + 1e-9 * max(1.0, t_e):
        raise ValueError(f"Ehrenfest time {t_e:.4g} exceeds available correlation {c.duration:.4g}")
    return spectrum(c.truncated(t_e), e_grid, window, symmetric=True, hbar=hbar)


def find_peaks(s: Spectrum, min_prominence: float = 0.05, relative: bool = True) -> list[float]:
    """Local maxima of |I(E)| with enough prominence, refined by a parabola.

    ``min_prominence`` is a fraction of max |I| when ``relative``.
    """
    from scipy.signal import find_peaks as _sp_find_peaks

    m = s.magnitude
    if m.size < 3 or not np.any(m > 0):
        return []
    thr = min_prominence * m.max() if relative else min_prominence
    idx, _ = _sp_find_peaks(m, prominence=thr)
    de = s.bin_width
    out = []
    for i in idx:
        y0, y1, y2 = m[i - 1], m[i], m[i + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        out.append(float(s.energies[i] + shift * de))
    return sorted(out)


def main_lobe_width(s: Spectrum, energy: float) -> float:
    """Full width of the lobe around ``energy`` at half the peak magnitude."""
    m = s.magnitude
    e = s.energies
    i = int(np.argmin(np.abs(e - energy)))
    # climb to the local maximum first
    while 0 < i < m.size - 1 and max(m[i - 1], m[i + 1]) > m[i]:
        i = i - 1 if m[i - 1] > m[i + 1] else i + 1
    half = 0.5 * m[i]
    lo = i
    while lo > 0 and m[lo] > half:
        lo -= 1
    hi = i
    while hi < m.size - 1 and m[hi] > half:
        hi += 1

    def cross(a, b):
        # linear interpolation of the half-maximum crossing between bins a and b
        if m[a] == m[b]:
            return e[a]
        return e[a] + (half - m[a]) * (e[b] - e[a]) / (m[b] - m[a])

    return float(cross(hi - 1, hi) - cross(lo + 1, lo)) if hi > lo + 1 else float(2 * s.bin_width)


def _extraction_weights(t: np.ndarray, lo: float, hi: float, window: str, symmetric: bool) -> np.ndarray:
    if window not in WINDOWS:
        raise ValueError(f"window must be one of {WINDOWS}")
    if window == "none":
        return np.ones_like(t)
    if symmetric:
        # Hann over [-hi, hi], centred on t = 0
        return 0.5 * (1 + np.cos(np.pi * t / hi))
    if hi <= lo:
        return np.ones_like(t)
    return 0.5 * (1 - np.cos(2 * np.pi * (t - lo) / (hi - lo)))


def _accumulate(segs: list[WaveSeries], energies: np.ndarray, lo: float, hi: float, window: str,
                symmetric: bool, hbar: float, skip_zero: bool, chunk: int) -> tuple[np.ndarray, int]:
    grid = segs[0].grid
    acc = np.zeros((energies.size, grid.size), dtype=np.complex128)
    used = 0
    for seg in segs:
        t = seg.times
        sel = np.nonzero((t >= lo - 1e-9 * seg.dt) & (t <= hi + 1e-9 * seg.dt))[0]
        if skip_zero:
            sel = sel[np.abs(t[sel]) > 1e-12 * seg.dt]
        if sel.size == 0:
            continue
        used += sel.size
        w = _extraction_weights(t[sel], lo, hi, window, symmetric) * seg.dt
        flat = seg.frames.reshape(len(seg), -1)
        for i in range(0, sel.size, chunk):
            idx = sel[i:i + chunk]
            block = np.asarray(flat[idx[0]:idx[-1] + 1])[idx - idx[0]]
            coef = np.exp(1j * np.outer(energies, t[idx]) / hbar) * w[i:i + chunk]
            acc += coef @ block
    return acc, used


def extract_states(series, energies, t_range: tuple[float, float] | None = None, window: str = "none",
                   backward=None, hbar: float = 1.0, normalized: bool = True,
                   chunk: int = 128) -> list[Wavefunction]:
    """phi(E) = sum_k psi(t_k) exp(i E t_k / hbar) w_k dt for several energies in one pass.

    ``backward`` holds chi(t) = U(t) conj(psi_0); for a real Hamiltonian
    psi(-t) = conj(chi(t)), which extends the sum symmetrically to
    [-t_max, t_max]. With ``window="hann"`` the weights taper to zero at the
    ends of the range (centred on t = 0 in the symmetric case).
    """
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    if not np.all(np.isfinite(energies)):
        raise ValueError("energies must be finite")
    segs = _as_segments(series)
    grid = segs[0].grid
    t_first, t_last = segs[0].t0, segs[-1].t0 + segs[-1].dt * (len(segs[-1]) - 1)
    lo, hi = (t_first, t_last) if t_range is None else t_range
    sym = backward is not None
    if sym:
        lo = 0.0
    acc, used = _accumulate(segs, energies, lo, hi, window, sym, hbar, False, chunk)
    if used == 0:
        raise ValueError(f"no frames in time range [{lo}, {hi}]")
    if sym:
        bsegs = _as_segments(backward)
        _check_grid(grid, bsegs[0].grid)
        b_last = bsegs[-1].t0 + bsegs[-1].dt * (len(bsegs[-1]) - 1)
        if b_last < hi - 1e-9 * max(1.0, hi):
            raise ValueError("backward series must cover the same times as the forward one")
        # psi(-t) e^{-iEt} = conj(chi(t) e^{iEt}); t = 0 is already counted
        bacc, _ = _accumulate(bsegs, energies, lo, hi, window, True, hbar, True, chunk)
        acc += bacc.conj()
    out = []
    for e, a in zip(energies, acc):
        psi = Wavefunction(grid, a.reshape(grid.shape), f"E={e:.6g}")
        out.append(normalize(psi) if normalized else psi)
    return out


def extract_state(series, energy: float, t_range: tuple[float, float] | None = None,
                  window: str = "none", backward=None, hbar: float = 1.0,
                  normalized: bool = True) -> Wavefunction:
    """phi(E) = sum_k psi(t_k) exp(i E t_k / hbar) dt over ``t_range``; see extract_states."""
    if not np.isfinite(energy):
        raise ValueError("energy must be finite")
    return extract_states(series, [energy], t_range, window, backward, hbar, normalized)[0]


# ---------------------------------------------------------------------------
# Pipelines: initial state -> FFT frames -> reservoir -> spectrum -> states


def _energy_grid(cfg, e_ref: float) -> np.ndarray:
    o = cfg.spectral
    e_max = 2.0 * e_ref if o.e_max is None else o.e_max
    if not e_max > o.e_min:
        raise ValueError(f"empty energy range [{o.e_min}, {e_max}]")
    return np.linspace(o.e_min, e_max, o.n_energies)


def _frame_mse(a: WaveSeries, b: WaveSeries, n: int, chunk: int = 128) -> np.ndarray:
    """Mean over grid points of |a_k - b_k|^2 for the first n frames."""
    n = min(n, len(a), len(b))
    out = np.empty(n)
    fa, fb = a.flat(), b.flat()
    for i in range(0, n, chunk):
        j = min(i + chunk, n)
        d = np.asarray(fa[i:j]) - np.asarray(fb[i:j])
        out[i:j] = np.mean(np.abs(d) ** 2, axis=1)
    return out


def aligned_mse(psi: Wavefunction, ref: Wavefunction) -> float:
    """Mean |psi - ref|^2 over the grid after removing the global phase of psi."""
    _check_grid(psi.grid, ref.grid)
    c = np.vdot(psi.amplitudes, ref.amplitudes)
    phase = c / abs(c) if abs(c) > 0 else 1.0
    return float(np.mean(np.abs(psi.amplitudes * phase - ref.amplitudes) ** 2))


def _diagonal_defect(psi: Wavefunction) -> float:
    # max over the grid of ||psi(x, y)| - |psi(y, x)||, relative to max |psi|
    m = np.abs(psi.amplitudes)
    if m.shape[0] != m.shape[1] or m.max() == 0:
        return float("nan")
    return float(np.max(np.abs(m - m.T)) / m.max())


def _match(values, targets) -> np.ndarray:
    """Index of the nearest target for every value."""
    targets = np.asarray(targets, dtype=float)
    return np.array([int(np.argmin(np.abs(targets - v))) for v in values], dtype=int)


@dataclass
class _Workspace:
    path: str

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)


@contextmanager
def _workspace(workdir):
    if workdir is not None:
        os.makedirs(workdir, exist_ok=True)
        yield _Workspace(os.fspath(workdir))
    else:
        with tempfile.TemporaryDirectory(prefix="qscar-") as d:
            yield _Workspace(d)


def _forward_segments(psi0: Wavefunction, cfg, plan, ws: _Workspace, use_rc: bool, n_train: int,
                      n_test: int, tag: str = ""):
    """FFT frames 0..n_train, then n_test more frames from the reservoir (or FFT).

    Returns (segments, model or None, timings).
    """
    stride = cfg.times.stride
    timings = {}
    t = time.perf_counter()
    train = propagate(psi0, n_train * stride, plan, stride, out_path=ws.file(f"fft{tag}.qwf"))
    timings["fft_s"] = time.perf_counter() - t
    if n_test == 0:
        return [train], None, timings
    if not use_rc:
        t = time.perf_counter()
        rest = _continue_fft(train, plan, stride, n_test, ws.file(f"fft_cont{tag}.qwf"))
        timings["fft_s"] += time.perf_counter() - t
        return [train, rest], None, timings
    t = time.perf_counter()
    model = reservoir.train_two_stage(reservoir.init(cfg.reservoir, psi0.grid.size), train)
    timings["rc_train_s"] = time.perf_counter() - t
    t = time.perf_counter()
    rest = reservoir.free_run(model, n_test, out_path=ws.file(f"rc{tag}.qwf"))
    timings["rc_run_s"] = time.perf_counter() - t
    return [train, rest], model, timings


def _continue_fft(train: WaveSeries, plan, stride: int, n_frames: int, path) -> WaveSeries:
    last = train.frame(len(train) - 1)
    return propagate(Wavefunction(last.grid, np.array(last.amplitudes)), n_frames * stride, plan, stride,
                     out_path=path, t0=float(train.times[-1]), skip_first=True)


@dataclass(eq=False)
class EigenResult:
    """Peaks of the long-time spectrum and the states extracted at them.

    ``reference`` is filled when the run is repeated with FFT frames in place
    of the reservoir's: per-peak squared energy errors, phase-aligned
    eigenfunction MSEs and the per-frame MSE of the free run (grid units).
    """

    name: str
    energy: float
    spectrum: Spectrum
    correlation: Correlation
    energies: np.ndarray
    amplitudes: np.ndarray
    states: list
    residuals: np.ndarray
    symmetry_defects: np.ndarray
    reference: dict | None = None
    rc_diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = {"name": self.name, "energy": self.energy, "n_frames": len(self.correlation),
             "duration": self.correlation.duration,
             "peaks": [{"energy": float(e), "amplitude": float(a), "residual": float(r),
                        "symmetry_defect": float(s)}
                       for e, a, r, s in zip(self.energies, self.amplitudes, self.residuals,
                                             self.symmetry_defects)],
             "rc_diagnostics": self.rc_diagnostics, "timings": self.timings}
        if self.reference is not None:
            ref = dict(self.reference)
            ref.pop("frame_mse", None)
            d["reference"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in ref.items()}
        return d

    def write(self, outdir) -> list[str]:
        """energies.csv, spectrum.csv and one state{k}.qwf per peak."""
        os.makedirs(outdir, exist_ok=True)
        paths = [os.path.join(outdir, "energies.csv"), os.path.join(outdir, "spectrum.csv")]
        mse = (self.reference or {}).get("state_mse")
        de2 = (self.reference or {}).get("energy_sq_error")
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "energy", "amplitude", "residual", "energy_sq_error_vs_reference",
                        "state_mse_vs_reference"])
            for k, (e, a, r) in enumerate(zip(self.energies, self.amplitudes, self.residuals)):
                w.writerow([k, f"{e:.8g}", f"{a:.6g}", f"{r:.6g}",
                            "" if de2 is None else f"{de2[k]:.6g}", "" if mse is None else f"{mse[k]:.6g}"])
        _write_spectrum_csv(paths[1], self.spectrum)
        for k, psi in enumerate(self.states):
            p = os.path.join(outdir, f"state{k}.qwf")
            write_wavefunction(p, psi)
            paths.append(p)
        return paths


def _write_spectrum_csv(path, s: Spectrum) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["energy", "re", "im", "abs"])
        for e, a in zip(s.energies, s.amplitude):
            w.writerow([f"{e:.8g}", f"{a.real:.8g}", f"{a.imag:.8g}", f"{abs(a):.8g}"])


def _spectral_states(segs, psi0, cfg, plan, e_ref):
    """Spectrum, peaks and extracted states for one set of segments."""
    o = cfg.spectral
    hbar = cfg.model.hbar
    c = correlation(segs, psi0)
    s = spectrum(c, _energy_grid(cfg, e_ref), o.window, symmetric=o.symmetric_time == "hermitian",
                 hbar=hbar)
    peaks = np.array(find_peaks(s, o.prominence))
    states = extract_states(segs, peaks, window=o.window, hbar=hbar) if peaks.size else []
    return c, s, peaks, states


def eigen_pipeline(cfg, use_rc: bool = True, reference: bool = False, max_frames: int | None = None,
                   workdir=None, mse_frames: int = 1000) -> EigenResult:
    """Eigenenergies and eigenfunctions from a Gaussian packet.

    FFT frames 0..t_train train the reservoir, which predicts t_test more;
    with ``use_rc=False`` the FFT runs over the whole time. ``max_frames``
    caps the number of frames after the initial one. With ``reference`` the
    same analysis is repeated on an FFT continuation and compared.
    """
    from .wavepacket import gaussian

    if cfg.packet is None:
        raise ValueError("eigen pipeline needs a Gaussian packet in the config")
    params = cfg.model
    grid = cfg.grid
    psi0 = gaussian(cfg.packet, grid, params)
    e_ref = cfg.energy if cfg.energy is not None else _packet_energy(cfg)
    plan = PropagatorPlan(grid, cfg.times.dt, params)
    n_train, n_test = cfg.times.t_train, cfg.times.t_test
    if max_frames is not None:
        n_train = min(n_train, max_frames)
        n_test = min(n_test, max_frames - n_train)
    if not use_rc:
        n_train, n_test = n_train + n_test, 0
    with _workspace(workdir) as ws:
        segs, model, timings = _forward_segments(psi0, cfg, plan, ws, use_rc, n_train, n_test)
        t = time.perf_counter()
        c, s, peaks, states = _spectral_states(segs, psi0, cfg, plan, e_ref)
        timings["analysis_s"] = time.perf_counter() - t
        ref = None
        if reference and model is not None:
            t = time.perf_counter()
            cont = _continue_fft(segs[0], plan, cfg.times.stride, n_test, ws.file("fft_ref.qwf"))
            frame_mse = _frame_mse(segs[1], cont, mse_frames)
            _, _, ref_peaks, ref_states = _spectral_states([segs[0], cont], psi0, cfg, plan, e_ref)
            ref = {"energies": ref_peaks, "frame_mse": frame_mse,
                   "frame_mse_max": float(frame_mse.max()) if frame_mse.size else float("nan")}
            if ref_peaks.size and peaks.size:
                j = _match(peaks, ref_peaks)
                ref["energy_sq_error"] = (peaks - ref_peaks[j]) ** 2
                ref["state_mse"] = np.array([aligned_mse(states[k], ref_states[i]) for k, i in enumerate(j)])
            timings["reference_s"] = time.perf_counter() - t
    residuals = np.array([residual_norm(p, e, plan) for p, e in zip(states, peaks)])
    amps = np.interp(peaks, s.energies, s.magnitude) if peaks.size else np.array([])
    return EigenResult(cfg.name, float(e_ref), s, c, peaks, amps, states, residuals,
                       np.array([_diagonal_defect(p) for p in states]), ref,
                       dict(model.diagnostics) if model is not None else {}, timings)


def _packet_energy(cfg) -> float:
    from .potential import hamiltonian_value

    return hamiltonian_value(cfg.packet.center, cfg.model)


@dataclass(eq=False)
class ScarState:
    n: int
    epsilon_n: float
    energy: float
    t_e: float
    peaks: list
    state: Wavefunction | None
    display: Wavefunction | None
    mass_near_orbit: float
    low_res: Spectrum
    full: Spectrum
    low_res_width: float
    full_width: float

    @property
    def rel_diff(self) -> float:
        return (self.energy - self.epsilon_n) / self.epsilon_n


@dataclass(eq=False)
class ScarResult:
    orbit: str
    scars: list
    rc_diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def table(self) -> list[dict]:
        return [{"n": s.n, "epsilon_n": s.epsilon_n, "E_RC": s.energy, "rel_diff": s.rel_diff}
                for s in self.scars]

    def summary(self) -> dict:
        return {"orbit": self.orbit,
                "scars": [dict(row, t_e=s.t_e, peaks=s.peaks, mass_near_orbit=s.mass_near_orbit,
                               low_res_width=s.low_res_width, full_width=s.full_width)
                          for row, s in zip(self.table(), self.scars)],
                "rc_diagnostics": self.rc_diagnostics, "timings": self.timings}

    def write(self, outdir) -> list[str]:
        """bs_compare.csv plus, per n, the scar (scaled to E = 1) and its spectra."""
        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, "bs_compare.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "epsilon_n", "E_RC", "rel_diff"])
            for r in self.table():
                w.writerow([r["n"], f"{r['epsilon_n']:.8g}", f"{r['E_RC']:.8g}", f"{r['rel_diff']:.6g}"])
        paths = [path]
        for s in self.scars:
            p = os.path.join(outdir, f"spectrum_n{s.n}.csv")
            _write_spectrum_csv(p, s.low_res)
            paths.append(p)
            if s.display is not None:
                p = os.path.join(outdir, f"scar_n{s.n}.qwf")
                write_wavefunction(p, s.display)
                paths.append(p)
        return paths


def _dominant_peak(s: Spectrum, peaks) -> float:
    if not len(peaks):
        return float("nan")
    amp = np.interp(peaks, s.energies, s.magnitude)
    return float(peaks[int(np.argmax(amp))])


def scar_pipeline(cfg, use_rc: bool = True, workdir=None, n_values=None) -> ScarResult:
    """Scar energies and scarred functions for each n of the configured orbit.

    For every n a tube function at eps_n is propagated (FFT, then the
    reservoir), the spectrum truncated at the Ehrenfest time gives E_RC as its
    dominant peak, and the scar is extracted over [-t_E, t_E]. Negative times
    come from an explicit FFT run of conj(psi_0) (``scar_fields =
    "explicit_backward"``) or, with ``"hermitian"``, from the forward frames
    themselves, which is exact only for a real psi_0.
    """
    from .classical import ehrenfest_time
    from .potential import scale_wavefunction_domain
    from .wavepacket import mass_near_curve, orbit_curve, tube_function

    if cfg.tube is None:
        raise ValueError("scar pipeline needs a tube section in the config")
    o = cfg.spectral
    params, grid, hbar = cfg.model, cfg.grid, cfg.model.hbar
    plan = PropagatorPlan(grid, cfg.times.dt, params)
    stride = cfg.times.stride
    specs = cfg.tube.specs()
    if n_values is not None:
        specs = [sp for sp in specs if sp.n in set(n_values)]
    out = ScarResult(cfg.tube.orbit, [])
    for spec in specs:
        eps = spec.epsilon_n
        t_e = ehrenfest_time(eps, params)
        psi0 = tube_function(spec, grid, params)
        with _workspace(None if workdir is None else os.path.join(workdir, f"n{spec.n}")) as ws:
            segs, model, timings = _forward_segments(psi0, cfg, plan, ws, use_rc, cfg.times.t_train,
                                                     cfg.times.t_test)
            for k, v in timings.items():
                out.timings[k] = out.timings.get(k, 0.0) + v
            if model is not None:
                out.rc_diagnostics[f"n{spec.n}"] = dict(model.diagnostics)
            c = correlation(segs, psi0)
            e_grid = _energy_grid(cfg, eps)
            low = low_res_spectrum(c, e_grid, t_e, o.window, hbar)
            full = spectrum(c, e_grid, o.window, symmetric=o.symmetric_time == "hermitian", hbar=hbar)
            peaks = find_peaks(low, o.prominence)
            e_rc = _dominant_peak(low, peaks)
            state = display = None
            mass = float("nan")
            if np.isfinite(e_rc):
                if o.scar_fields == "explicit_backward":
                    n_b = int(np.ceil(t_e / (plan.dt * stride) - 1e-9))
                    back = propagate(psi0.with_amplitudes(psi0.amplitudes.conj()), n_b * stride, plan,
                                     stride, out_path=ws.file("backward.qwf"))
                else:
                    back = segs
                state = extract_state(segs, e_rc, (0.0, t_e), o.window, backward=back, hbar=hbar)
                state = state.with_amplitudes(state.amplitudes, f"scar_{spec.orbit.name}_n{spec.n}")
                curve = orbit_curve(spec.orbit, eps, params)
                mass = mass_near_curve(state, curve, SCAR_TUBE_RADIUS)
                display = scale_wavefunction_domain(state, 1.0, e_rc)
            out.scars.append(ScarState(spec.n, eps, e_rc, t_e, [float(p) for p in peaks], state, display,
                                       mass, low, full,
                                       main_lobe_width(low, e_rc) if np.isfinite(e_rc) else float("nan"),
                                       main_lobe_width(full, e_rc) if np.isfinite(e_rc) else float("nan")))
    return out


def speed_benchmark(cfg, psi0: Wavefunction, steps: int = 500, train_frames: int | None = None,
                    model=None, repeats: int = 3) -> dict:
    """Wall time of the FFT and reservoir paths per stored frame, both in memory.

    One reservoir step produces one frame, which the FFT reaches in
    ``stride`` steps. Each path is timed ``repeats`` times and the fastest
    run is kept. A model is trained on ``train_frames`` FFT frames unless one
    is given.
    """
    if steps < 1 or repeats < 1:
        raise ValueError("steps and repeats must be >= 1")
    plan = PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model)
    stride = cfg.times.stride
    train_s = 0.0
    if model is None:
        n_train = cfg.times.t_train if train_frames is None else train_frames
        if n_train < cfg.reservoir.t_min + 2:
            raise reservoir.SeriesTooShortError(f"need more than t_min + 1 = {cfg.reservoir.t_min + 1} frames")
        series = propagate(psi0, n_train * stride, plan, stride)
        t = time.perf_counter()
        model = reservoir.train_two_stage(reservoir.init(cfg.reservoir, cfg.grid.size), series)
        train_s = time.perf_counter() - t
        del series
    fft, rc_state, rc_decode = [], [], []
    for _ in range(repeats):
        t = time.perf_counter()
        out = propagate(psi0, steps * stride, plan, stride)
        fft.append((time.perf_counter() - t) / steps)
        del out
        t = time.perf_counter()
        run = reservoir.free_run_states(model, steps)
        rc_state.append((time.perf_counter() - t) / steps)
        t = time.perf_counter()
        out = run.to_series()
        rc_decode.append((time.perf_counter() - t) / steps)
        del out, run
    fft_frame = min(fft)
    rc_step = min(a + b for a, b in zip(rc_state, rc_decode))
    return {"grid": list(cfg.grid.shape), "n_nodes": model.N, "stride": stride, "steps": steps,
            "repeats": repeats, "rc_train_s": train_s, "fft_per_step_s": fft_frame / stride,
            "fft_per_frame_s": fft_frame, "rc_per_step_s": rc_step, "rc_state_update_s": min(rc_state),
            "rc_decode_s": min(rc_decode), "ratio_rc_to_fft_frame": rc_step / fft_frame,
            "ratio_rc_to_fft_step": rc_step * stride / fft_frame}
