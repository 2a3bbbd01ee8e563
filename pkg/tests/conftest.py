import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meshdrr.geometry import DetectorGeometry, ProjectionCamera  # noqa: E402
from meshdrr.primitives import box, icosphere, merge, torus  # noqa: E402


def rotx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rotz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def generic_cameras():
    """Three cameras with sub-pixel offsets so no pixel ray grazes a mesh edge exactly.

    The second one has a left-handed detector frame, the third is tilted.
    """
    det = DetectorGeometry.centered(96, 96, 1.7, center=(0.31, -0.17, -400))
    cams = [ProjectionCamera.from_geometry((0.13, 0.07, 600), det, name="axial")]
    det2 = DetectorGeometry.centered(80, 90, 2.1, center=(0, 0, -300),
                                     axis_u=(0, 1, 0), axis_v=(1, 0, 0))
    cams.append(ProjectionCamera.from_geometry((3.3, -2.1, 500), det2, name="swapped"))
    R = rotx(0.3) @ rotz(0.2)
    det3 = DetectorGeometry.centered(100, 70, 1.9, center=R @ np.array([0, 0, -350.0]),
                                     axis_u=R @ [1, 0, 0], axis_v=R @ [0, 1, 0])
    cams.append(ProjectionCamera.from_geometry(R @ np.array([0.4, 0.2, 650.0]), det3, name="tilted"))
    return cams


def oracle_meshes():
    return {
        "cube": box((40, 40, 40)).transformed(rotx(0.1) @ rotz(0.37), (1.1, 0.7, 5)),
        "icosphere_l2": icosphere(45, 2, (0.5, -1.2, 2)),
        "icosphere_l4": icosphere(50, 4, (0.3, 0.2, -1)),
        "torus": torus(35, 12).transformed(rotx(0.6), (0.2, 0.1, 0)),
        "nested_cubes": merge([box((60, 60, 60)), box((20, 20, 20))]).transformed(
            rotx(0.21) @ rotz(0.13), (0.3, 0.4, 0.2)),
    }


@pytest.fixture(scope="session")
def cameras():
    return generic_cameras()


@pytest.fixture(scope="session")
def meshes():
    return oracle_meshes()


@pytest.fixture(autouse=True)
def _quiet_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="meshdrr")
