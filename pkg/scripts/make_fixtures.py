"""Regenerate the golden byte fixtures under tests/fixtures.

Run only when a format changes on purpose; the tests compare writer output to
these committed files byte for byte.
"""

from pathlib import Path

import numpy as np

from specfield import hsio
from specfield.field import VoxelField

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def fixture_cube():
    return hsio.SpectralCube(np.arange(12, dtype=np.float32).reshape(2, 3, 2) * 0.25)


def fixture_field():
    E = np.array([[0.25, 0.75], [0.5, 1.0]])
    fld = VoxelField.empty((2, 2, 2), [[-1, -1, -1], [1, 1, 1]], E, sh_degree=0)
    fld.grid[:] = np.arange(fld.grid.size).reshape(fld.grid.shape) * 0.5 - 4.0
    return fld


def fixture_labels():
    return np.array([[0, 1, 65535], [2, 1, 0]], dtype=np.uint16)


def fixture_gray():
    return np.array([[0, 128], [255, 7]], dtype=np.uint8)


def fixture_rgb():
    return np.array([[[255, 0, 0], [0, 255, 10]]], dtype=np.uint8)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    hsio.write_cube(fixture_cube(), OUT / "cube.hsc")
    hsio.write_field(fixture_field(), OUT / "field.umf")
    hsio.write_labels(fixture_labels(), OUT / "labels.seg")
    hsio.write_pgm(fixture_gray(), OUT / "gray.pgm")
    hsio.write_ppm(fixture_rgb(), OUT / "rgb.ppm")
    print(f"wrote fixtures to {OUT}")


if __name__ == "__main__":
    main()
