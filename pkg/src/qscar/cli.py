"""Command-line entry point: ``qscar <command> [options]``.

Every command prints a JSON summary on stdout. Exit codes: 0 success,
2 usage, 3 malformed config, 4 file or format error, 5 numerical failure,
6 reservoir error, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time

import numpy as np

from . import __version__
from .classical import (IntegrationError, ORBIT_NAMES, bs_energies, closure_defect, ehrenfest_time,
                        get_orbit, integrate, with_measured_action)
from .config import ConfigError, RunConfig, Times, load_config, packet_energy, preset
from .domain import (GridMismatchError, QWFError, Wavefunction, read_series, read_wavefunction,
                     write_wavefunction)
from .oracle import OracleConvergenceError, lowest_eigenpairs
from .propagator import PropagatorPlan, energy_expectation, propagate, set_fft_workers
from .render import SCALINGS, render
from .reservoir import (QRCError, ReservoirError, SeriesTooShortError, free_run, init, load_model, save_model,
                        train_two_stage)
from .spectral import eigen_pipeline, scar_pipeline, speed_benchmark
from .wavepacket import GridLeakError, TubeClosureError, TubeSpec, gaussian, tube_function

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5
EXIT_RESERVOIR = 6

log = logging.getLogger("qscar")


class UsageError(Exception):
    pass


def parse_n_values(text: str) -> tuple[int, ...]:
    """'4..10', '4,6,8' or a mix such as '3..5,8'; empty text gives ()."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        m = re.fullmatch(r"(-?\d+)\s*\.\.\s*(-?\d+)", part)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if b < a:
                raise UsageError(f"empty range {part!r}")
            out.extend(range(a, b + 1))
        elif re.fullmatch(r"-?\d+", part):
            out.append(int(part))
        else:
            raise UsageError(f"cannot parse quantum numbers {part!r}")
    return tuple(out)


def _load(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        raise UsageError("give --preset NAME or --config PATH")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "stride", None) is not None:
        t = cfg.times
        d = cfg.to_dict()
        d["times"] = vars(Times(t.dt, t.t_train, t.t_test, args.stride)).copy()
        cfg = RunConfig.from_dict(d)
    return cfg


def _initial_state(cfg: RunConfig, n: int | None = None) -> Wavefunction:
    if cfg.packet is not None:
        return gaussian(cfg.packet, cfg.grid, cfg.model)
    specs = cfg.tube.specs()
    if n is not None:
        specs = [s for s in specs if s.n == n] or [TubeSpec(get_orbit(cfg.tube.orbit), n, cfg.tube.alpha_x,
                                                            cfg.tube.alpha_y, forced=True)]
    if not specs:
        raise ConfigError("tube config lists no quantum numbers")
    return tube_function(specs[0], cfg.grid, cfg.model)


def _outdir(args) -> str:
    d = args.outdir or "."
    os.makedirs(d, exist_ok=True)
    return d


def cmd_packet(args) -> dict:
    cfg = _load(args)
    psi = _initial_state(cfg, args.n)
    out = args.out or os.path.join(_outdir(args), "psi0.qwf")
    write_wavefunction(out, psi)
    plan = PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model)
    return {"out": out, "label": psi.label, "norm": psi.norm(),
            "energy_expectation": energy_expectation(psi, plan), "nominal_energy": packet_energy(cfg)}


def cmd_po(args) -> dict:
    names = ORBIT_NAMES if args.orbit == "all" else (args.orbit,)
    rows = []
    for name in names:
        po = get_orbit(name)
        energy = args.energy
        measured = with_measured_action(po, args.dt)
        traj = integrate(po.ic, args.dt, po.period)
        e = traj.energies()
        n_values = parse_n_values(args.n) if args.n else po.n_values
        row = {"orbit": po.name, "ic": po.ic.as_array().tolist(), "period": po.period,
               "action": measured.action, "maslov": po.maslov, "p_ratio": po.p_ratio, "nd": po.nd,
               "closure_defect": closure_defect(po, args.dt),
               "energy_drift": float(np.max(np.abs(e - e[0])) / abs(e[0])),
               "bs_energies": dict(zip(map(str, n_values), bs_energies(po, n_values, dt=args.dt)))}
        if energy is not None:
            s = po.scaled(energy)
            row["scaled"] = {"energy": energy, "ic": s.ic.as_array().tolist(), "period": s.period,
                             "ehrenfest_time": ehrenfest_time(energy)}
        rows.append(row)
        if args.out:
            if len(names) > 1:
                raise UsageError("--out needs a single --orbit")
            _write_trajectory(args.out, traj)
    return {"orbits": rows, "out": args.out}


def _write_trajectory(path, traj) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "px", "py", "Sx", "Sy"])
        for t, z, sx, sy in zip(traj.t, traj.z, traj.sx, traj.sy):
            w.writerow([f"{t:.10g}"] + [f"{v:.12g}" for v in z] + [f"{sx:.12g}", f"{sy:.12g}"])


def cmd_propagate(args) -> dict:
    cfg = _load(args)
    psi0 = read_wavefunction(args.psi) if args.psi else _initial_state(cfg, args.n)
    if psi0.grid != cfg.grid:
        raise GridMismatchError("initial state grid differs from the config grid")
    stride = cfg.times.stride
    frames = args.frames if args.frames is not None else cfg.times.t_train
    plan = PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model)
    out = args.out or os.path.join(_outdir(args), "series.qwf")
    t = time.perf_counter()
    series = propagate(psi0, frames * stride, plan, stride, out_path=out)
    wall = time.perf_counter() - t
    last = series.frame(len(series) - 1)
    return {"out": out, "frames": len(series), "frame_dt": series.dt, "steps": frames * stride,
            "wall_s": wall, "final_norm": last.norm(),
            "energy_initial": energy_expectation(psi0, plan), "energy_final": energy_expectation(last, plan)}


def cmd_rc_train(args) -> dict:
    cfg = _load(args)
    series = read_series(args.series, mmap=True)
    t = time.perf_counter()
    model = train_two_stage(init(cfg.reservoir, series.grid.size), series)
    wall = time.perf_counter() - t
    save_model(args.out, model)
    return {"out": args.out, "frames": len(series), "n_nodes": model.N, "L": model.L, "train_s": wall,
            "diagnostics": model.diagnostics}


def cmd_rc_predict(args) -> dict:
    model = load_model(args.model)
    t = time.perf_counter()
    series = free_run(model, args.steps, out_path=args.out)
    wall = time.perf_counter() - t
    return {"out": args.out, "frames": len(series), "t0": series.t0, "frame_dt": series.dt, "run_s": wall,
            "per_step_s": wall / max(args.steps, 1)}


def cmd_eigen(args) -> dict:
    cfg = _load(args)
    res = eigen_pipeline(cfg, use_rc=not args.fft_only, reference=args.reference,
                         max_frames=args.max_frames, workdir=args.workdir)
    out = _outdir(args)
    paths = res.write(out)
    return dict(res.summary(), outputs=paths)


def cmd_scar(args) -> dict:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or args.orbit)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.orbit is not None or args.n is not None:
        d = cfg.to_dict()
        if d.get("tube") is None:
            raise ConfigError("scar command needs a tube config")
        if args.orbit is not None:
            d["tube"]["orbit"] = args.orbit.replace("-", "_")
            if args.n is None:
                d["tube"]["n_values"] = list(get_orbit(args.orbit).n_values)
        if args.n is not None:
            d["tube"]["n_values"] = list(parse_n_values(args.n))
        cfg = RunConfig.from_dict(d)
    res = scar_pipeline(cfg, use_rc=not args.fft_only, workdir=args.workdir)
    out = _outdir(args)
    paths = res.write(out)
    return dict(res.summary(), outputs=paths)


def cmd_oracle(args) -> dict:
    cfg = _load(args)
    plan = PropagatorPlan(cfg.grid, cfg.times.dt, cfg.model)
    filt = None if args.filter.lower() == "none" else args.filter
    pairs = lowest_eigenpairs(plan, args.k, symmetry_filter=filt, tol=args.tol)
    out = _outdir(args) if args.outdir else None
    paths = []
    if out:
        path = os.path.join(out, "energies.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "energy", "residual"])
            for k, p in enumerate(pairs):
                w.writerow([k, f"{p.energy:.10g}", f"{p.residual:.6g}"])
        paths.append(path)
        for k, p in enumerate(pairs):
            path = os.path.join(out, f"oracle{k}.qwf")
            write_wavefunction(path, p.state)
            paths.append(path)
    return {"filter": filt, "energies": [p.energy for p in pairs], "residuals": [p.residual for p in pairs],
            "outputs": paths}


def cmd_render(args) -> dict:
    series = read_series(args.input, mmap=True)
    if not 0 <= args.index < len(series) and not -len(series) <= args.index < 0:
        raise UsageError(f"frame index {args.index} out of range for {len(series)} frames")
    psi = Wavefunction(series.grid, np.array(series.frames[args.index]))
    out = args.out or os.path.splitext(args.input)[0] + ".pgm"
    img = render(psi, out, args.scaling, args.contour)
    return {"out": out, "width": int(img.shape[1]), "height": int(img.shape[0]), "max_pixel": int(img.max())}


def cmd_bench(args) -> dict:
    """Wall time per stored frame of the FFT and reservoir paths at the config's sizes."""
    cfg = _load(args)
    try:
        return speed_benchmark(cfg, _initial_state(cfg), args.steps, args.train_frames)
    except SeriesTooShortError as exc:
        raise UsageError(f"--train-frames: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qscar", description="Quartic-oscillator eigenstates and scars from FFT propagation and reservoir computing.")
    p.add_argument("--version", action="version", version=f"qscar {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="FFT worker threads (default: $QSCAR_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, outdir=True):
        sp.add_argument("--preset", help="built-in config: E1, E10, E100 or an orbit name")
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--stride", type=int, help="store every k-th FFT step")
        if outdir:
            sp.add_argument("--outdir")

    sp = sub.add_parser("packet", help="write the initial state of a config")
    common(sp)
    sp.add_argument("--n", type=int, help="quantum number for tube configs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_packet)

    sp = sub.add_parser("po", help="periodic-orbit data, closure and Bohr-Sommerfeld energies")
    sp.add_argument("--orbit", default="all", choices=("all",) + ORBIT_NAMES + tuple(
        n.replace("_", "-") for n in ORBIT_NAMES))
    sp.add_argument("--energy", type=float)
    sp.add_argument("--dt", type=float, default=1e-4)
    sp.add_argument("--n", help="quantum numbers, e.g. 4..10")
    sp.add_argument("--out", help="CSV of the trajectory over one period (single orbit)")
    sp.set_defaults(func=cmd_po)

    sp = sub.add_parser("propagate", help="split-operator FFT propagation to a QWF series")
    common(sp)
    sp.add_argument("--psi", help="initial state QWF (default: the config's packet)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--frames", type=int, help="frames after the initial one (default t_train)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("rc-train", help="train a reservoir on a QWF series")
    common(sp, outdir=False)
    sp.add_argument("--series", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_rc_train)

    sp = sub.add_parser("rc-predict", help="free-run a trained reservoir")
    sp.add_argument("--model", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_rc_predict)

    sp = sub.add_parser("eigen", help="eigenenergies and eigenfunctions from a Gaussian packet")
    common(sp)
    sp.add_argument("--reference", action="store_true", help="also run the FFT over the test window and compare")
    sp.add_argument("--fft-only", action="store_true", help="use FFT frames for the whole run")
    sp.add_argument("--max-frames", type=int)
    sp.add_argument("--workdir", help="keep the frame series here instead of a temporary directory")
    sp.set_defaults(func=cmd_eigen)

    sp = sub.add_parser("scar", help="scar energies and scarred functions along a periodic orbit")
    common(sp)
    sp.add_argument("--orbit")
    sp.add_argument("--n", help="quantum numbers, e.g. 4..10 or 4,6")
    sp.add_argument("--fft-only", action="store_true")
    sp.add_argument("--workdir")
    sp.set_defaults(func=cmd_scar)

    sp = sub.add_parser("oracle", help="lowest eigenpairs by Lanczos on the grid Hamiltonian")
    common(sp)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--filter", default="A1", help="A1 or none")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("render", help="write |psi|^2 of a QWF frame as an 8-bit PGM")
    sp.add_argument("input")
    sp.add_argument("--out")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--scaling", choices=SCALINGS, default="linear")
    sp.add_argument("--contour", type=float, help="draw the equipotential V = E")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("bench", help="per-step wall time of the FFT and reservoir paths")
    common(sp)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--train-frames", type=int, help="FFT frames used to train the reservoir (default t_train)")
    sp.set_defaults(func=cmd_bench)
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("QSCAR_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"QSCAR_THREADS={env!r} is not an integer") from None
    return 1


def _jsonable(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _error(code: int, exc: BaseException) -> int:
    print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc), "exit_code": code}))
    print(f"qscar: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_fft_workers(_threads(args))
        result = args.func(args)
    except UsageError as exc:
        return _error(EXIT_USAGE, exc)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, exc)
    except (QWFError, QRCError, GridMismatchError, OSError) as exc:
        return _error(EXIT_IO, exc)
    except (TubeClosureError, GridLeakError, OracleConvergenceError, IntegrationError,
            FloatingPointError) as exc:
        return _error(EXIT_NUMERIC, exc)
    except ReservoirError as exc:
        return _error(EXIT_RESERVOIR, exc)
    except KeyError as exc:
        return _error(EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001 - reported as a generic failure
        return _error(EXIT_ERROR, exc)
    print(json.dumps(_clean(dict(result, ok=True, command=args.command)), default=_jsonable))
    return EXIT_OK


def _clean(o):
    # NaN and inf become null so the output stays strict JSON
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (float, np.floating)) and not math.isfinite(float(o)):
        return None
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return o


if __name__ == "__main__":
    sys.exit(main())
