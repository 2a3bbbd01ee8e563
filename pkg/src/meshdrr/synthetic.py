"""Default synthetic acquisition: camera, spectrum and attenuation tables.

Attenuation values are rounded approximations of water, cortical bone and
air; they give realistic contrast but are not reference data.
"""
import numpy as np

from .compositor import MaterialTable, Spectrum
from .geometry import DetectorGeometry, ProjectionCamera
from .pipeline import RenderSetup

ENERGIES_KEV = np.array([40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0])

# 1/mm
MU_WATER = np.array([0.0268, 0.0227, 0.0206, 0.0193, 0.0184, 0.0177, 0.0171])
MU_BONE = np.array([0.128, 0.085, 0.060, 0.050, 0.043, 0.039, 0.036])
MU_AIR = np.array([3.0e-5, 2.5e-5, 2.2e-5, 2.1e-5, 2.0e-5, 1.9e-5, 1.8e-5])

SPECTRUM_WEIGHTS = np.array([0.10, 0.22, 0.24, 0.18, 0.12, 0.08, 0.06])


def default_materials() -> MaterialTable:
    return MaterialTable({
        "air": (ENERGIES_KEV, MU_AIR),
        "body": (ENERGIES_KEV, MU_WATER),
        "bones": (ENERGIES_KEV, MU_BONE),
    })


def default_spectrum() -> Spectrum:
    return Spectrum(ENERGIES_KEV, SPECTRUM_WEIGHTS, name="synthetic100kVp")


def default_camera(width_px=160, height_px=160, pitch_mm=1.6, source_to_iso=700.0,
                   source_to_detector=1000.0, name="synthetic") -> ProjectionCamera:
    """Source on +z above the world origin, detector plane perpendicular to z."""
    det = DetectorGeometry.centered(width_px, height_px, pitch_mm,
                                    center=(0.0, 0.0, source_to_iso - source_to_detector))
    return ProjectionCamera.from_geometry((0.0, 0.0, source_to_iso), det, name=name)


def default_setup(**camera_kw) -> RenderSetup:
    return RenderSetup(default_camera(**camera_kw), default_spectrum(), default_materials(), K=8)
