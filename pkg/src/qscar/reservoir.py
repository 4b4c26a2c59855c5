"""Complex-valued echo-state network with output feedback.

The network has no input layer: the internal state is driven only by the
fed-back output (a flattened wavefunction frame). Frames enter the network
scaled by sqrt(dx*dy), so a normalized wavefunction is a unit vector.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import zipfile
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import eigs

from .domain import Grid, QWFWriter, WaveSeries, read_series

log = logging.getLogger(__name__)


class ReservoirError(RuntimeError):
    pass


class UntrainedModelError(ReservoirError):
    pass


class SeriesTooShortError(ReservoirError, ValueError):
    pass


@dataclass(frozen=True)
class ReservoirConfig:
    n_nodes: int = 2000
    spectral_radius: float = 0.5
    density: float = 0.005
    leak: float = 0.2
    ridge: float = 1e-3
    t_min: int = 500
    seed: int = 0
    split_first: float = 0.8
    feedback_scale: float = 1.0
    renormalize: bool = True

    def __post_init__(self):
        if not 0 < self.leak <= 1:
            raise ValueError("leak rate must lie in (0, 1]")
        if not self.spectral_radius > 0:
            raise ValueError("spectral radius must be positive")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge coefficient must be >= 0")
        if not 0 < self.split_first <= 1:
            raise ValueError("split_first must lie in (0, 1]")
        if self.n_nodes < 1 or self.t_min < 0:
            raise ValueError("n_nodes must be >= 1 and t_min >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReservoirConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True, eq=False)
class _FastReadout:
    """Low-rank factors of a readout fitted on R rows.

    With W_out = Y^T P (Y the R target rows, P = conj(X) A^-T) the feedback
    W_back W_out x equals ``drive @ (coef @ x)`` and ||W_out x||^2 equals
    c^H gram c, so a free-running step costs O(N R) instead of O(N L).
    """

    coef: np.ndarray    # R x N
    drive: np.ndarray   # N x R  (W_back Y^T)
    gram: np.ndarray | None   # R x R  (conj(Y) Y^T); None when the rows of Y are orthonormal
    targets: np.ndarray | None = None   # R x L  (Y), lets frames be decoded as Y^T c


@dataclass(eq=False)
class ReservoirModel:
    config: ReservoirConfig
    W: sp.csr_matrix
    W_back: np.ndarray
    L: int
    state: np.ndarray
    W_out: np.ndarray | None = None
    grid: Grid | None = None
    dt: float | None = None
    t_last: float = 0.0
    last_output: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    fast: _FastReadout | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.config.n_nodes

    @property
    def trained(self) -> bool:
        return self.W_out is not None


def spectral_radius(W, seed: int = 0) -> float:
    """Largest eigenvalue modulus of a square (sparse) matrix."""
    n = W.shape[0]
    if n <= 64:
        return float(np.max(np.abs(np.linalg.eigvals(W.toarray() if sp.issparse(W) else W))))
    v0 = np.random.default_rng(seed).standard_normal(n)
    vals = eigs(W, k=1, which="LM", v0=v0, tol=1e-12, maxiter=10 * n, ncv=min(n - 1, 40),
                return_eigenvectors=False)
    return float(np.abs(vals).max())


def init(config: ReservoirConfig, L: int) -> ReservoirModel:
    """Random recurrent and feedback matrices, deterministic in ``config.seed``."""
    N = config.n_nodes
    if L < 1:
        raise ValueError("output dimension must be >= 1")
    nnz = int(round(config.density * N * N))
    if config.density * N < 1 or nnz < 1:
        raise ReservoirError(f"n_nodes*density = {config.density * N:.3g} < 1 gives an empty reservoir")
    rng = np.random.default_rng(config.seed)
    W = sp.random(N, N, density=nnz / (N * N), format="csr", random_state=rng,
                  data_rvs=lambda k: rng.uniform(-1.0, 1.0, size=k))
    rho = spectral_radius(W, seed=config.seed)
    if rho == 0:
        raise ReservoirError("recurrent matrix has zero spectral radius")
    W = (W * (config.spectral_radius / rho)).tocsr()
    W_back = rng.uniform(-1.0, 1.0, size=(N, L)) * config.feedback_scale
    return ReservoirModel(config, W, W_back, L, np.zeros(N, dtype=np.complex128))


def activation(z):
    """tanh applied separately to the real and imaginary parts."""
    z = np.asarray(z)
    return np.tanh(z.real) + 1j * np.tanh(z.imag)


def _update(model: ReservoirModel, x: np.ndarray, feedback: np.ndarray) -> np.ndarray:
    a = model.config.leak
    return (1 - a) * x + a * activation(model.W @ x + feedback)


def drive(model: ReservoirModel, y_prev: np.ndarray, state: np.ndarray | None = None) -> np.ndarray:
    """One teacher-forced update; returns the new state without touching the model."""
    x = model.state if state is None else np.asarray(state)
    y_prev = np.asarray(y_prev).ravel()
    if y_prev.shape[0] != model.L or x.shape[0] != model.N:
        raise ValueError(f"dimension mismatch: y {y_prev.shape[0]} vs L={model.L}, x {x.shape[0]} vs N={model.N}")
    return _update(model, x, model.W_back @ y_prev)


def _feedback_inputs(model: ReservoirModel, Y: np.ndarray, chunk: int = 256) -> np.ndarray:
    # W_back @ y for every row y of Y, as one blocked GEMM per chunk
    out = np.empty((Y.shape[0], model.N), dtype=np.complex128)
    Wt = model.W_back.T
    for i in range(0, Y.shape[0], chunk):
        blk = np.asarray(Y[i:i + chunk])
        out[i:i + chunk] = blk.real @ Wt + 1j * (blk.imag @ Wt)
    return out


def _scaled_rows(series: WaveSeries, i0: int = 0, i1: int | None = None) -> np.ndarray:
    w = np.sqrt(series.grid.cell_area)
    return np.asarray(series.flat()[i0:i1]) * w


def collect_states(model: ReservoirModel, teach: WaveSeries, state: np.ndarray | None = None,
                   U: np.ndarray | None = None):
    """Teacher-force through ``teach``; return (X, Y, final_state).

    Row j of X is the state after feeding frame t_min + j and row j of Y is
    the frame that follows it, giving len(teach) - t_min - 1 rows.
    """
    n = len(teach)
    t_min = model.config.t_min
    if n < t_min + 2:
        raise SeriesTooShortError(f"series of {n} frames is too short for t_min={t_min}")
    if teach.grid.size != model.L:
        raise ValueError("series grid does not match the reservoir output dimension")
    if U is None:
        U = _feedback_inputs(model, _scaled_rows(teach, 0, n - 1))
    x = np.zeros(model.N, dtype=np.complex128) if state is None else np.array(state, dtype=np.complex128)
    X = np.empty((n - t_min - 1, model.N), dtype=np.complex128)
    for t in range(1, n):
        x = _update(model, x, U[t - 1])
        if t > t_min:
            X[t - t_min - 1] = x
    Y = _scaled_rows(teach, t_min + 1, n)
    return X, Y, x


def _factor(X: np.ndarray, gamma: float):
    A = X.conj().T @ X
    A[np.diag_indices_from(A)] += gamma
    try:
        return sla.cho_factor(A, lower=False, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise ReservoirError("singular normal equations; use a ridge coefficient gamma > 0") from exc


def fit_readout(X: np.ndarray, Y: np.ndarray, gamma: float) -> np.ndarray:
    """Closed-form complex ridge regression; returns W_out with shape (L, N).

    Solves (X^H X + gamma I) B = X^H Y and returns B^T, so that a state row x
    predicts y = W_out x.
    """
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("design matrix needs at least one row")
    if gamma < 0:
        raise ValueError("ridge coefficient must be >= 0")
    if gamma == 0 and np.linalg.matrix_rank(X) < X.shape[1]:
        raise ReservoirError("rank-deficient states with gamma = 0; use a ridge coefficient gamma > 0")
    cf = _factor(X, gamma)
    B = sla.cho_solve(cf, X.conj().T @ Y, overwrite_b=True)
    return B.T


def _fit_fast(model: ReservoirModel, X: np.ndarray, U_target: np.ndarray, gram: np.ndarray):
    """Ridge fit in low-rank form: W_out = Y^T coef with coef = conj(X) A^-T."""
    cf = _factor(X, model.config.ridge)
    # A is Hermitian, so conj(X) A^-T = (A^-1 X^H)^T
    coef = sla.cho_solve(cf, X.conj().T).T       # R x N
    return _FastReadout(coef, np.ascontiguousarray(U_target.T), gram)


def _orthonormal_readout(model: ReservoirModel, fast: _FastReadout, Y: np.ndarray) -> _FastReadout:
    """Same readout with the target rows replaced by an orthonormal basis.

    With Y = U S V^H, Y^T coef = (V^H)^T (S U^T coef): no rows are dropped,
    so W_out is unchanged, and ||W_out x|| becomes the plain norm of the
    coefficient vector.
    """
    U, S, Vh = np.linalg.svd(Y, full_matrices=False)
    coef = S[:, None] * (U.T @ fast.coef)
    drive = np.ascontiguousarray(_feedback_inputs(model, Vh).T)
    return _FastReadout(coef, drive, None, Vh)


def _gram(Y: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # conj(Y) Y^T accumulated over column blocks to bound temporaries
    G = np.zeros((Y.shape[0], Y.shape[0]), dtype=np.complex128)
    for i in range(0, Y.shape[1], chunk):
        blk = Y[:, i:i + chunk]
        G += blk.conj() @ blk.T
    return G


def _lowrank_residuals(X: np.ndarray, target_idx: np.ndarray, coef: np.ndarray, G: np.ndarray) -> np.ndarray:
    """||y_t - W_out x||^2 per row when W_out = Y^T coef over the rows of G.

    ``coef`` may cover only the leading rows of the Gram matrix.
    """
    R = G.shape[0]
    M = np.zeros((X.shape[0], R), dtype=np.complex128)
    M[:, :coef.shape[0]] = -(X @ coef.T)
    M[np.arange(X.shape[0]), target_idx] += 1.0
    return np.einsum("ij,ij->i", M.conj() @ G, M).real


def _lowrank_penalty(coef: np.ndarray, G: np.ndarray) -> float:
    # ||Y^T coef||_F^2 = tr(coef^H G coef)
    r = coef.shape[0]
    return float(np.sum(coef.conj() * (G[:r, :r] @ coef)).real)


class _Stepper:
    """Autoregressive update of the reservoir in either direct or low-rank form."""

    def __init__(self, model: ReservoirModel):
        if not model.trained and model.fast is None:
            raise UntrainedModelError("reservoir has no trained readout")
        self.model = model
        self.renorm = model.config.renormalize
        self.fast = model.fast
        self.last_out = None

    def output_scale(self, x: np.ndarray) -> tuple[np.ndarray | None, float]:
        """Return (y or None, 1/||y|| or 1) for state x."""
        m = self.model
        if self.fast is not None:
            c = self.fast.coef @ x
            s = 1.0
            if self.renorm:
                g = self.fast.gram
                n2 = np.vdot(c, c).real if g is None else np.vdot(c, g @ c).real
                s = 1.0 / np.sqrt(max(n2, 1e-300))
            return c, s
        y = m.W_out @ x
        s = 1.0 / max(np.linalg.norm(y), 1e-300) if self.renorm else 1.0
        return y, s

    def feedback(self, out, s: float) -> np.ndarray:
        if self.fast is not None:
            return (self.fast.drive @ out) * s
        return self.model.W_back @ (out * s)

    def run(self, x: np.ndarray, fb: np.ndarray, n_steps: int):
        """Yield (state, scale) for n_steps predicted outputs starting from feedback fb."""
        for _ in range(n_steps):
            x = _update(self.model, x, fb)
            out, s = self.output_scale(x)
            self.last_out = out
            yield x, s
            fb = self.feedback(out, s)


def train_two_stage(model: ReservoirModel, teach: WaveSeries) -> ReservoirModel:
    """Two-stage readout training.

    Stage 1 teacher-forces the first ``split_first`` fraction of the frames
    and fits W_out. Stage 2 carries on from the stage-1 state, feeding back
    the model's own predictions, and pairs those states with the true frames;
    the readout is then refitted on the rows of both stages.
    """
    cfg = model.config
    n = len(teach)
    if teach.grid.size != model.L:
        raise ValueError("series grid does not match the reservoir output dimension")
    n1 = int(np.floor(cfg.split_first * n))
    if n1 < cfg.t_min + 2:
        raise SeriesTooShortError(f"first stage of {n1} frames is too short for t_min={cfg.t_min}")
    rows_all = _scaled_rows(teach)
    U_all = _feedback_inputs(model, rows_all)
    X1, _, x1 = collect_states(model, WaveSeries(teach.grid, teach.dt, teach.frames[:n1], teach.t0),
                               U=U_all[: n1 - 1])
    # target rows of both stages are the contiguous frames t_min+1 .. n-1
    Y = rows_all[cfg.t_min + 1:]
    U_t = U_all[cfg.t_min + 1:]
    G = _gram(Y)
    R1 = X1.shape[0]
    fast1 = _fit_fast(model, X1, U_t[:R1], G[:R1, :R1])
    idx1 = np.arange(R1)
    res1 = _lowrank_residuals(X1, idx1, fast1.coef, G[:R1, :R1])
    diag = {"stage1_rows": int(R1), "stage1_mse": float(res1.sum() / (R1 * model.L))}

    n2 = n - n1
    if n2 > 0:
        stepper = _Stepper(dataclasses.replace(model, fast=fast1))
        out, s = stepper.output_scale(x1)
        fb = stepper.feedback(out, s)
        X2 = np.empty((n2, model.N), dtype=np.complex128)
        for j, (x, _s) in enumerate(stepper.run(x1, fb, n2)):
            X2[j] = x
        X = np.vstack([X1, X2])
        idx = np.arange(X.shape[0])
        res_before = _lowrank_residuals(X, idx, fast1.coef, G)
        fast = _fit_fast(model, X, U_t, G)
        res_after = _lowrank_residuals(X, idx, fast.coef, G)
        diag.update(stage2_rows=int(n2),
                    stage2_mse_before=float(res_before[R1:].sum() / (n2 * model.L)),
                    stage2_mse=float(res_after[R1:].sum() / (n2 * model.L)),
                    objective_stage1_readout=float(res_before.sum() + cfg.ridge * _lowrank_penalty(fast1.coef, G)),
                    objective_refit=float(res_after.sum() + cfg.ridge * _lowrank_penalty(fast.coef, G)))
        # the readout was fitted on the free-running stage-2 states, so the
        # prediction continues from the last of them
        x = X2[-1].copy()
        del X1, X2
    else:
        fast = fast1
        x = x1
        diag.update(stage2_rows=0)
    W_out = np.asarray(Y).T @ fast.coef
    fast = _orthonormal_readout(model, fast, np.asarray(Y))
    trained = dataclasses.replace(model, W_out=W_out, fast=fast, state=x, grid=teach.grid,
                                  dt=teach.dt, t_last=float(teach.times[-1]),
                                  last_output=rows_all[-1].copy(), diagnostics=diag)
    log.info("reservoir trained: %s", diag)
    return trained


def _row_mse(X, Y, W_out) -> float:
    # mean over rows and components of |y - W_out x|^2, in scaled units
    R = np.asarray(Y) - X @ W_out.T
    return float(np.mean(np.abs(R) ** 2))


def _ridge_objective(X, Y, W_out, gamma) -> float:
    R = np.asarray(Y) - X @ W_out.T
    return float(np.sum(np.abs(R) ** 2) + gamma * np.sum(np.abs(W_out) ** 2))


@dataclass(eq=False)
class FreeRun:
    """States of an autoregressive run; frames are W_out x_k scaled to unit norm."""

    model: ReservoirModel
    states: np.ndarray
    scales: np.ndarray
    t0: float
    coefs: np.ndarray | None = None   # c_k = coef x_k when the readout is low-rank

    def __len__(self):
        return self.states.shape[0]

    def rows(self, i0: int = 0, i1: int | None = None, factor: float = 1.0) -> np.ndarray:
        fast = self.model.fast
        sc = self.scales[i0:i1, None] * factor
        if self.coefs is not None and fast is not None and fast.targets is not None:
            # W_out x = Y^T (coef x): R instead of N products per grid point
            return (self.coefs[i0:i1] * sc) @ fast.targets
        return (self.states[i0:i1] * sc) @ self.model.W_out.T

    def iter_blocks(self, chunk: int = 128):
        """Blocks of frames in physical units, shape (k, nx, ny)."""
        g = self.model.grid
        w = 1.0 / np.sqrt(g.cell_area)
        for i in range(0, len(self), chunk):
            yield i, self.rows(i, i + chunk, w).reshape((-1,) + g.shape)

    def iter_frames(self, chunk: int = 128):
        for _, block in self.iter_blocks(chunk):
            yield from block

    def to_series(self, out_path=None) -> WaveSeries:
        g, dt = self.model.grid, self.model.dt
        if out_path is not None:
            with QWFWriter(out_path, g, dt, self.t0) as wr:
                for f in self.iter_frames():
                    wr.write(f)
            return read_series(out_path, mmap=True)
        frames = np.empty((len(self),) + g.shape, dtype=np.complex128)
        for i, block in self.iter_blocks():
            frames[i:i + len(block)] = block
        return WaveSeries(g, dt, frames, self.t0, label="rc")


def free_run_states(model: ReservoirModel, n_steps: int, state: np.ndarray | None = None,
                    last_output: np.ndarray | None = None) -> FreeRun:
    """Run the trained model autoregressively from its warm state."""
    stepper = _Stepper(model)
    if model.last_output is None and last_output is None:
        raise UntrainedModelError("model has no warm state to continue from")
    x = np.array(model.state if state is None else state, dtype=np.complex128)
    y = np.asarray(model.last_output if last_output is None else last_output).ravel()
    fb = model.W_back @ y
    states = np.empty((n_steps, model.N), dtype=np.complex128)
    scales = np.empty(n_steps)
    fast = stepper.fast
    coefs = None
    if fast is not None and fast.targets is not None:
        coefs = np.empty((n_steps, fast.coef.shape[0]), dtype=np.complex128)
    for k, (x, s) in enumerate(stepper.run(x, fb, n_steps)):
        states[k] = x
        scales[k] = s
        if coefs is not None:
            coefs[k] = stepper.last_out
    t0 = model.t_last + (model.dt or 1.0)
    return FreeRun(model, states, scales, t0, coefs)


def free_run(model: ReservoirModel, n_steps: int, out_path=None) -> WaveSeries:
    """Predict ``n_steps`` frames beyond the training series."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if model.grid is None:
        raise UntrainedModelError("model is not bound to a grid; train it first")
    run = free_run_states(model, n_steps)
    return run.to_series(out_path)


QRC_MAGIC = b"QRC1"
_QRC_LEN = struct.Struct("<Q")


class QRCError(ValueError):
    pass


def save_model(path, model: ReservoirModel) -> None:
    """Write a model as QRC: magic, JSON metadata, then an npz payload.

    The payload holds W as CSR triplets, W_back, W_out, the warm state and
    last output, and the low-rank readout factors when present.
    """
    meta = {"config": model.config.to_dict(), "seed": model.config.seed, "L": model.L, "N": model.N,
            "grid": None if model.grid is None else model.grid.to_dict(), "dt": model.dt,
            "t_last": model.t_last, "diagnostics": model.diagnostics}
    arrays = {"W_data": model.W.data, "W_indices": model.W.indices, "W_indptr": model.W.indptr,
              "W_back": model.W_back, "state": model.state}
    if model.W_out is not None:
        arrays["W_out"] = model.W_out
    if model.last_output is not None:
        arrays["last_output"] = model.last_output
    if model.fast is not None:
        arrays.update(fast_coef=model.fast.coef, fast_drive=model.fast.drive)
        if model.fast.gram is not None:
            arrays.update(fast_gram=model.fast.gram)
        if model.fast.targets is not None:
            arrays.update(fast_targets=model.fast.targets)
    blob = json.dumps(meta).encode("utf-8")
    with open(os.fspath(path), "wb") as fh:
        fh.write(QRC_MAGIC)
        fh.write(_QRC_LEN.pack(len(blob)))
        fh.write(blob)
        np.savez(fh, **arrays)


def load_model(path) -> ReservoirModel:
    with open(os.fspath(path), "rb") as fh:
        if fh.read(4) != QRC_MAGIC:
            raise QRCError(f"{path}: not a QRC file (bad magic)")
        raw = fh.read(_QRC_LEN.size)
        if len(raw) < _QRC_LEN.size:
            raise QRCError(f"{path}: truncated header")
        (n,) = _QRC_LEN.unpack(raw)
        blob = fh.read(n)
        if len(blob) < n:
            raise QRCError(f"{path}: truncated metadata")
        try:
            meta = json.loads(blob)
            with np.load(fh) as z:
                arrays = {k: z[k] for k in z.files}
        except (ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
            raise QRCError(f"{path}: corrupt payload: {exc}") from exc
    cfg = ReservoirConfig.from_dict(meta["config"])
    N, L = int(meta["N"]), int(meta["L"])
    W = sp.csr_matrix((arrays["W_data"], arrays["W_indices"], arrays["W_indptr"]), shape=(N, N))
    fast = None
    if "fast_coef" in arrays:
        fast = _FastReadout(arrays["fast_coef"], arrays["fast_drive"], arrays.get("fast_gram"),
                            arrays.get("fast_targets"))
    return ReservoirModel(cfg, W, arrays["W_back"], L, arrays["state"], arrays.get("W_out"),
                          None if meta["grid"] is None else Grid.from_dict(meta["grid"]),
                          meta["dt"], float(meta["t_last"]), arrays.get("last_output"),
                          meta.get("diagnostics", {}), fast)
