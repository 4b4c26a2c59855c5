"""8-bit PGM images of probability densities."""
from __future__ import annotations

import os
import re

import numpy as np

from .domain import Wavefunction
from .potential import ModelParams, potential_value

SCALINGS = ("linear", "sqrt")


def density_image(psi: Wavefunction, scaling: str = "linear", contour_energy: float | None = None,
                  params: ModelParams = ModelParams()) -> np.ndarray:
    """|psi|^2 mapped to uint8, with y increasing upwards in the image.

    With ``contour_energy`` the equipotential V = E is drawn at 255.
    """
    if scaling not in SCALINGS:
        raise ValueError(f"scaling must be one of {SCALINGS}")
    d = psi.density()
    if scaling == "sqrt":
        d = np.sqrt(d)
    top = d.max()
    img = np.zeros(d.shape, dtype=np.uint8) if top <= 0 else np.rint(255.0 * d / top).astype(np.uint8)
    if contour_energy is not None:
        X, Y = psi.grid.mesh()
        inside = potential_value(X, Y, params) <= contour_energy
        # boundary cells: inside points with an outside 4-neighbour
        edge = np.zeros_like(inside)
        edge[1:, :] |= inside[1:, :] & ~inside[:-1, :]
        edge[:-1, :] |= inside[:-1, :] & ~inside[1:, :]
        edge[:, 1:] |= inside[:, 1:] & ~inside[:, :-1]
        edge[:, :-1] |= inside[:, :-1] & ~inside[:, 1:]
        img[edge] = 255
    # arrays are x-major; images are row-major from the top
    return np.ascontiguousarray(img.T[::-1])


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = img.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pix = data[m.end():]
    if len(pix) < w * h:
        raise ValueError(f"{path}: truncated PGM")
    return np.frombuffer(pix[:w * h], dtype=np.uint8).reshape(h, w)


def render(psi: Wavefunction, out_path, scaling: str = "linear", contour_energy: float | None = None,
           params: ModelParams = ModelParams()) -> np.ndarray:
    img = density_image(psi, scaling, contour_energy, params)
    write_pgm(out_path, img)
    return img
