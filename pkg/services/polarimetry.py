# polarseg/services/polarimetry.py
"""
Optics of four-direction polarization captures: Fresnel coefficients, Stokes
components, DoLP/AoLP and the AoLP horizontal-flip remap. All math is float64.
"""
import math
from typing import Literal, Tuple

import numpy as np

from api.models import FresnelResult, IntensityQuad, PolarDerived, StokesMap
from core.errors import InputValidationError, OpticsError, ShapeMismatchError

AolpConvention = Literal["s1_s2", "s2_s1"]


def compute_stokes(quad: IntensityQuad) -> StokesMap:
    """S0 = I0 + I90, S1 = I0 - I90, S2 = I45 - I135, per channel."""
    return StokesMap(s0=quad.i0 + quad.i90, s1=quad.i0 - quad.i90, s2=quad.i45 - quad.i135)


def quad_from_planes(i0, i45, i90, i135) -> IntensityQuad:
    """Build a quad, rejecting misaligned planes with the offending shapes."""
    shapes = [np.shape(p) for p in (i0, i45, i90, i135)]
    if len(set(shapes)) != 1:
        raise ShapeMismatchError("Intensity planes are not pixel-aligned", details={"shapes": shapes})
    return IntensityQuad(i0=i0, i45=i45, i90=i90, i135=i135)


def compute_dolp(stokes: StokesMap, eps_s0: float = 1e-12) -> np.ndarray:
    """sqrt(S1^2 + S2^2) / S0 clamped to [0, 1]; pixels with S0 <= eps_s0 are 0."""
    magnitude = np.hypot(stokes.s1, stokes.s2)
    dolp = np.zeros_like(magnitude)
    np.divide(magnitude, stokes.s0, out=dolp, where=stokes.s0 > eps_s0)
    return np.clip(dolp, 0.0, 1.0)


def compute_aolp(stokes: StokesMap, convention: AolpConvention = "s1_s2") -> np.ndarray:
    """
    Half the quadrant-resolved angle of (S1, S2) in degrees, wrapped into [0, 180).
    "s1_s2" uses atan2(S1, S2), the default; "s2_s1" is the usual atan2(S2, S1).
    Pixels with S1 = S2 = 0 are 0.
    """
    if convention == "s1_s2":
        angle = 0.5 * np.degrees(np.arctan2(stokes.s1, stokes.s2))
    elif convention == "s2_s1":
        angle = 0.5 * np.degrees(np.arctan2(stokes.s2, stokes.s1))
    else:
        raise InputValidationError(f"Unknown AoLP convention '{convention}'")
    angle = np.where(angle < 0, angle + 180.0, angle)
    angle = np.where(angle >= 180.0, angle - 180.0, angle)
    return np.where((stokes.s1 == 0) & (stokes.s2 == 0), 0.0, angle)


def derive_polarization(quad: IntensityQuad, convention: AolpConvention = "s1_s2",
                        eps_s0: float = 1e-12) -> PolarDerived:
    stokes = compute_stokes(quad)
    return PolarDerived(dolp=compute_dolp(stokes, eps_s0), aolp_deg=compute_aolp(stokes, convention))


def channel_mean(plane: np.ndarray) -> np.ndarray:
    """Reduce an H x W x C plane to the single H x W plane fed to the network."""
    return plane.mean(axis=2) if plane.ndim == 3 else plane


def synthesize_intensities(stokes: StokesMap, tolerance: float = 1e-9) -> IntensityQuad:
    """Inverse of compute_stokes. Rejects maps with s1^2 + s2^2 > s0^2 beyond tolerance."""
    excess = stokes.polarization_excess()
    limit = tolerance * np.maximum(stokes.s0 ** 2, 1.0)
    if np.any(stokes.s0 < 0) or np.any(excess > limit):
        worst = float(np.max(excess))
        raise OpticsError("Stokes map is not physically realizable (would give negative intensity)",
                          details={"max_excess": worst})
    s0, s1, s2 = stokes.s0, stokes.s1, stokes.s2
    return IntensityQuad(
        i0=np.maximum((s0 + s1) / 2.0, 0.0),
        i90=np.maximum((s0 - s1) / 2.0, 0.0),
        i45=np.maximum((s0 + s2) / 2.0, 0.0),
        i135=np.maximum((s0 - s2) / 2.0, 0.0),
    )


def _snell(n1: float, n2: float, theta_i: np.ndarray) -> np.ndarray:
    return (n1 / n2) * np.sin(theta_i)


def fresnel_coefficients(n1: float, n2: float, theta_i_deg: float) -> FresnelResult:
    """Amplitude reflection/transmission coefficients for s and p polarization."""
    if n1 <= 0 or n2 <= 0:
        raise InputValidationError("Refractive indices must be positive", details={"n1": n1, "n2": n2})
    if not 0 <= theta_i_deg < 90:
        raise InputValidationError("Incidence angle must lie in [0, 90) degrees",
                                   details={"theta_i_deg": theta_i_deg})
    theta_i = math.radians(theta_i_deg)
    sin_t = float(_snell(n1, n2, theta_i))
    if sin_t > 1.0:
        raise OpticsError("Total internal reflection: real-valued Fresnel coefficients are undefined",
                          details={"n1": n1, "n2": n2, "theta_i_deg": theta_i_deg})
    cos_i = math.cos(theta_i)
    cos_t = math.sqrt(1.0 - sin_t * sin_t)
    denom_s = n1 * cos_i + n2 * cos_t
    denom_p = n2 * cos_i + n1 * cos_t
    return FresnelResult(
        r_s=(n1 * cos_i - n2 * cos_t) / denom_s,
        r_p=(n2 * cos_i - n1 * cos_t) / denom_p,
        t_s=2.0 * n1 * cos_i / denom_s,
        t_p=2.0 * n1 * cos_i / denom_p,
        theta_t_deg=math.degrees(math.asin(sin_t)),
    )


def fresnel_reflectance(n1: float, n2: float, theta_i: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized |r_s|^2 and |r_p|^2 for incidence angles in radians (no TIR: n2 >= n1)."""
    if n2 < n1:
        raise OpticsError("fresnel_reflectance expects n2 >= n1", details={"n1": n1, "n2": n2})
    cos_i = np.cos(theta_i)
    cos_t = np.sqrt(1.0 - _snell(n1, n2, theta_i) ** 2)
    r_s = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t)
    r_p = (n2 * cos_i - n1 * cos_t) / (n2 * cos_i + n1 * cos_t)
    return r_s ** 2, r_p ** 2


def brewster_angle_deg(n1: float, n2: float) -> float:
    return math.degrees(math.atan2(n2, n1))


def flip_aolp_values(aolp_deg: np.ndarray) -> np.ndarray:
    """Horizontal-flip value remap a -> (180 - a) mod 180; spatial mirroring is the caller's job."""
    return np.mod(180.0 - np.asarray(aolp_deg, dtype=np.float64), 180.0)
