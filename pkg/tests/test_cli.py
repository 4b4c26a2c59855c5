import json
import subprocess
import sys

import numpy as np
import pytest

from qscar.cli import UsageError, main, parse_n_values
from qscar.config import RunConfig, SpectralOptions, Times
from qscar.domain import Grid, read_series, read_wavefunction
from qscar.potential import ModelParams
from qscar.render import read_pgm
from qscar.reservoir import ReservoirConfig
from qscar.wavepacket import GaussianSpec


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


@pytest.fixture
def tiny(tmp_path):
    cfg = RunConfig(
        name="tiny", model=ModelParams(), grid=Grid.square(32, 8.0), times=Times(0.01, 60, 40, 5),
        reservoir=ReservoirConfig(n_nodes=100, density=0.1, t_min=20, leak=0.5, ridge=1e-4,
                                  split_first=1.0, feedback_scale=0.1),
        packet=GaussianSpec(0.0, 0.0, 0.5, 0.5, 1.0, 1.0),
        spectral=SpectralOptions(e_max=4.0, window="hann", n_energies=801), energy=1.0)
    p = tmp_path / "tiny.json"
    p.write_text(cfg.to_json())
    return p


def test_parse_n_values():
    assert parse_n_values("4..7") == (4, 5, 6, 7)
    assert parse_n_values("3..4, 8") == (3, 4, 8)
    assert parse_n_values("") == ()
    for bad in ("7..4", "x", "4..", "1.5"):
        with pytest.raises(UsageError):
            parse_n_values(bad)


def test_po(capsys, tmp_path):
    code, r = run(capsys, "po", "--orbit", "square", "--energy", 15.5, "--n", "3..4",
                  "--out", tmp_path / "t.csv")
    assert code == 0 and r["ok"]
    row = r["orbits"][0]
    assert row["closure_defect"] <= 1e-3 and row["energy_drift"] <= 1e-8
    assert row["bs_energies"]["3"] == pytest.approx(15.498904, abs=1e-5)
    assert row["scaled"]["period"] < row["period"]
    assert (tmp_path / "t.csv").read_text().startswith("t,x,y,px,py,Sx,Sy")
    code, r = run(capsys, "po")
    assert code == 0 and len(r["orbits"]) == 4
    code, r = run(capsys, "po", "--out", tmp_path / "u.csv")
    assert code == 2


def test_packet_propagate_render(capsys, tiny, tmp_path):
    code, r = run(capsys, "packet", "--config", tiny, "--outdir", tmp_path)
    assert code == 0 and r["norm"] == pytest.approx(1.0)
    # the packet's momentum spread and potential add to the centre energy
    assert r["nominal_energy"] == 1.0 and r["energy_expectation"] > 1.0
    psi = read_wavefunction(r["out"])
    code, r = run(capsys, "propagate", "--config", tiny, "--frames", 10, "--out", tmp_path / "s.qwf")
    assert code == 0 and r["frames"] == 11 and abs(r["final_norm"] - 1) < 1e-12
    s = read_series(tmp_path / "s.qwf")
    assert np.array_equal(s.frames[0], psi.amplitudes) and s.dt == pytest.approx(0.05)
    code, r = run(capsys, "render", tmp_path / "s.qwf", "--index", -1, "--scaling", "sqrt", "--contour", 1.0)
    assert code == 0 and r["max_pixel"] == 255
    assert read_pgm(r["out"]).shape == (32, 32)
    code, r = run(capsys, "render", tmp_path / "s.qwf", "--index", 50)
    assert code == 2


def test_rc_train_predict(capsys, tiny, tmp_path):
    run(capsys, "propagate", "--config", tiny, "--frames", 60, "--out", tmp_path / "s.qwf")
    code, r = run(capsys, "rc-train", "--config", tiny, "--series", tmp_path / "s.qwf", "--out", tmp_path / "m.qrc")
    assert code == 0 and r["n_nodes"] == 100 and r["L"] == 1024
    code, r = run(capsys, "rc-predict", "--model", tmp_path / "m.qrc", "--steps", 5, "--out", tmp_path / "p.qwf")
    assert code == 0 and r["frames"] == 5 and r["t0"] == pytest.approx(3.05)
    assert read_series(tmp_path / "p.qwf").frames.shape == (5, 32, 32)
    (tmp_path / "bad.qrc").write_bytes(b"junk")
    code, r = run(capsys, "rc-predict", "--model", tmp_path / "bad.qrc", "--steps", 5, "--out", tmp_path / "q.qwf")
    assert code == 4 and not r["ok"]


def test_eigen_and_oracle(capsys, tiny, tmp_path):
    code, r = run(capsys, "eigen", "--config", tiny, "--reference", "--outdir", tmp_path / "e")
    assert code == 0 and r["n_frames"] == 101 and "reference" in r
    assert (tmp_path / "e" / "energies.csv").exists()
    code, r = run(capsys, "oracle", "--config", tiny, "--k", 2, "--outdir", tmp_path / "o")
    assert code == 0 and r["energies"][0] < r["energies"][1]
    assert read_wavefunction(tmp_path / "o" / "oracle0.qwf").grid.nx == 32


def test_bench_tiny(capsys, tiny):
    code, r = run(capsys, "bench", "--config", tiny, "--steps", 20, "--train-frames", 40)
    assert code == 0
    assert r["fft_per_frame_s"] == pytest.approx(5 * r["fft_per_step_s"])
    assert r["ratio_rc_to_fft_frame"] > 0
    code, r = run(capsys, "bench", "--config", tiny, "--steps", 20, "--train-frames", 10)
    assert code == 2


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "eigen", "--preset", "E7")[0] == 3
    (tmp_path / "c.json").write_text("{")
    assert run(capsys, "oracle", "--config", tmp_path / "c.json")[0] == 3
    assert run(capsys, "render", tmp_path / "missing.qwf")[0] == 4
    (tmp_path / "x.qwf").write_bytes(b"XXXX" + bytes(100))
    assert run(capsys, "render", tmp_path / "x.qwf")[0] == 4
    assert run(capsys, "oracle")[0] == 2
    assert main(["nosuchcommand"]) == 2
    capsys.readouterr()


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "qscar.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "qscar" in r.stdout
