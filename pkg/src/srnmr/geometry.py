"""Sensor-geometry calculators.

Closed-form design estimates (thermal prefactor, statistical noise,
crossover depth, detection volume, AC-Zeeman and diffusion rates) and the
numerical dipolar integrals: the geometric factor of a precessing sample
seen by a buried NV, and the back-action field map of the magnetized NV
layer seen by the sample.

All lengths are in meters unless a name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .constants import CONSTANTS

NV_AXIS = np.array([math.sqrt(2.0 / 3.0), 0.0, 1.0 / math.sqrt(3.0)])
# precession plane of the sample moment (B0 parallel to the NV axis)
Q1 = np.array([1.0 / math.sqrt(3.0), 0.0, -math.sqrt(2.0 / 3.0)])
Q2 = np.array([0.0, 1.0, 0.0])

HEMISPHERE_VOLUME_COEFF = 2.0 * math.pi / 3.0
_LADDER = (8, 16, 32, 64, 128, 256, 512)


class QuadratureError(RuntimeError):
    """Raised when a refinement ladder does not reach its tolerance."""

    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved relative change {achieved:.3g})")
        self.achieved = achieved


@dataclass(frozen=True)
class SampleVolumeShape:
    """Sample region above the diamond surface, with the NV at (0, 0, -nv_depth).

    ``extents`` is ``(radius,)`` for a hemisphere, ``(side,)`` for a cube and
    ``(lx, ly, lz)`` for a box; hemisphere and box are centered laterally
    over the NV.
    """

    kind: str
    extents: tuple
    nv_depth: float
    nv_axis: tuple = tuple(NV_AXIS)

    def __post_init__(self):
        if self.kind not in ("hemisphere", "cube", "box"):
            raise ValueError(f"kind: unknown shape {self.kind!r}")
        n_expected = 3 if self.kind == "box" else 1
        if len(self.extents) != n_expected:
            raise ValueError(f"extents: {self.kind} needs {n_expected} value(s)")
        if any(e <= 0 for e in self.extents):
            raise ValueError("extents: must be positive")
        if self.nv_depth <= 0:
            raise ValueError("nv_depth: must be positive")

    @property
    def volume(self):
        if self.kind == "hemisphere":
            return HEMISPHERE_VOLUME_COEFF * self.extents[0] ** 3
        if self.kind == "cube":
            return self.extents[0] ** 3
        lx, ly, lz = self.extents
        return lx * ly * lz

    @property
    def ratio(self):
        return self.volume ** (1.0 / 3.0) / self.nv_depth

    def box_dims(self):
        if self.kind == "cube":
            return (self.extents[0],) * 3
        return tuple(self.extents)

    @classmethod
    def from_ratio(cls, kind, ratio, nv_depth=1.0, aspect=(1.0, 1.0, 1.0)):
        """Build a shape of the given kind with V^(1/3)/d_NV equal to ``ratio``."""
        if ratio <= 0:
            raise ValueError("ratio: must be positive")
        side = ratio * nv_depth
        if kind == "hemisphere":
            return cls(kind, (side / HEMISPHERE_VOLUME_COEFF ** (1.0 / 3.0),), nv_depth)
        if kind == "cube":
            return cls(kind, (side,), nv_depth)
        a = np.asarray(aspect, dtype=float)
        a = a / np.prod(a) ** (1.0 / 3.0)
        return cls("box", tuple(float(x) for x in side * a), nv_depth)


@dataclass(frozen=True)
class NVLayerModel:
    polarized_density: float = 0.8e23  # m^-3
    xy_fwhm: tuple = (15e-6, 10e-6)
    z_extent: tuple = (-15e-6, 0.0)

    def __post_init__(self):
        if self.polarized_density <= 0:
            raise ValueError("polarized_density: must be positive")
        if not self.z_extent[0] < self.z_extent[1] <= 0:
            raise ValueError("z_extent: layer must lie below the surface")

    @property
    def sigmas(self):
        c = 2.0 * math.sqrt(2.0 * math.log(2.0))
        return self.xy_fwhm[0] / c, self.xy_fwhm[1] / c


# ---------------------------------------------------------------------------
# closed forms


def thermal_prefactor(b0, temp=300.0, rho=CONSTANTS.rho_water):
    """mu0 gamma^2 rho B0 / (2 pi k_B T) in tesla."""
    c = CONSTANTS
    return c.mu0 * c.gamma_p_moment**2 * rho * b0 / (2.0 * math.pi * c.k_b * temp)


def thermal_field_scale(b0, temp=300.0, rho=CONSTANTS.rho_water):
    """mu0/(4 pi) times the thermal magnetization rho mu tanh(mu B0 / k_B T).

    Equals half of :func:`thermal_prefactor` in the high-temperature limit;
    the prefactor's bracket 1 - exp(-2x) counts the population difference
    relative to one level rather than the total.
    """
    c = CONSTANTS
    x = c.gamma_p_moment * b0 / (c.k_b * temp)
    return c.mu0 / (4.0 * math.pi) * rho * c.gamma_p_moment * math.tanh(x)


def statistical_noise_std(d_nv, rho=CONSTANTS.rho_water):
    """RMS projected field of unpolarized spin noise from a half-space."""
    if d_nv <= 0:
        raise ValueError("d_nv: must be positive")
    c = CONSTANTS
    return math.sqrt(rho * c.mu0**2 * c.gamma_p_moment**2 / (96.0 * math.pi * d_nv**3))


def crossover_depth(b0, temp=300.0, rho=CONSTANTS.rho_water, g_asymptotic=None):
    """NV depth at which the thermal mean field equals the spin-noise RMS.

    ``g_asymptotic`` is the geometric factor magnitude (dipolar-integral
    normalization); by default the semi-infinite hemisphere value.
    """
    if g_asymptotic is None:
        g_asymptotic = abs(hemisphere_asymptote())
    if min(b0, temp, rho, g_asymptotic) <= 0:
        raise ValueError("crossover_depth: inputs must be positive")
    c = CONSTANTS
    mean = thermal_field_scale(b0, temp, rho) * g_asymptotic
    # sigma(d) = A d^-3/2
    a = math.sqrt(rho * c.mu0**2 * c.gamma_p_moment**2 / (96.0 * math.pi))
    return (a / mean) ** (2.0 / 3.0)


def min_thermal_volume(b0, temp=300.0, rho=CONSTANTS.rho_water):
    """(2 k_B T / (gamma B0))^2 / rho: volume where mean magnetization beats sqrt(N)."""
    c = CONSTANTS
    return (2.0 * c.k_b * temp / (c.gamma_p_moment * b0)) ** 2 / rho


def detection_volume(d_nv, kappa=2.4):
    if d_nv <= 0:
        raise ValueError("d_nv: must be positive")
    return HEMISPHERE_VOLUME_COEFF * (kappa * d_nv) ** 3


def back_action_prefactor(polarized_density):
    if polarized_density < 0:
        raise ValueError("polarized_density: must be non-negative")
    c = CONSTANTS
    return c.mu0 * c.mu_b * polarized_density / (8.0 * math.pi)


def ac_zeeman_broadening(rabi, detuning):
    if detuning == 0:
        raise ValueError("detuning: must be non-zero")
    c = CONSTANTS
    return rabi**2 / abs(detuning) * (c.gamma_p_freq / c.gamma_nv_freq) ** 2


def diffusion_rate(d_coeff, volume):
    """(pi tau_c)^-1 = (6/pi) D / V^(2/3)."""
    if d_coeff <= 0 or volume <= 0:
        raise ValueError("diffusion_rate: inputs must be positive")
    return 6.0 / math.pi * d_coeff / volume ** (2.0 / 3.0)


def duty_cycle_broadening(map_stats, duty, prefactor):
    """Linewidth contribution (Hz) of the back-action field switched on for ``duty``."""
    if not 0.0 <= duty <= 1.0:
        raise ValueError("duty: must lie in [0, 1]")
    spread = map_stats["max"] - map_stats["min"]
    return spread * prefactor * duty * CONSTANTS.gamma_p_freq


def scaling_projection(b0, sensitivity, volume=1e-15, averaging=600.0, temp=300.0,
                       g_factor=None, snr=3.0):
    """Spin-number sensitivity and minimum detectable proton concentration.

    Returns a dict with ``spins_per_rthz`` and ``min_concentration_at_snr3``
    (mol/L of protons for the requested ``snr``).
    """
    if min(b0, sensitivity, volume, averaging) <= 0:
        raise ValueError("scaling_projection: inputs must be positive")
    if g_factor is None:
        g_factor = abs(hemisphere_asymptote())
    per_density = thermal_field_scale(b0, temp, 1.0) * g_factor  # T per (m^-3)
    rho_per_rthz = sensitivity / per_density
    rho_min = snr * sensitivity / math.sqrt(averaging) / per_density
    return {
        "spins_per_rthz": rho_per_rthz * volume,
        "min_concentration_at_snr3": rho_min / (CONSTANTS.avogadro * 1e3),
    }


# ---------------------------------------------------------------------------
# geometric factor


def _angular_factor(sin_t, cos_t, phi, moment, axis):
    rx = sin_t * np.cos(phi)
    ry = sin_t * np.sin(phi)
    rm = rx * moment[0] + ry * moment[1] + cos_t * moment[2]
    ra = rx * axis[0] + ry * axis[1] + cos_t * axis[2]
    return 3.0 * rm * ra - float(np.dot(moment, axis))


def _gl(n, a, b):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * (x + 1.0) + a, 0.5 * (b - a) * w


def _hemisphere_sum(radius, d, n, moment, axis):
    # the radial integral of dV/r^3 is ln(r_exit / r_entry)
    th_rim = math.atan2(radius, d)
    th, wt = _gl(n, 0.0, th_rim)
    n_phi = max(8, n // 2)
    phi = np.arange(n_phi) * (2.0 * np.pi / n_phi)
    s, c = np.sin(th), np.cos(th)
    r1 = d / c
    r2 = d * c + np.sqrt(radius**2 - (d * s) ** 2)
    radial = np.log(r2 / r1) * s * wt
    f = _angular_factor(s[:, None], c[:, None], phi[None, :], moment, axis)
    w = radial[:, None] * (2.0 * np.pi / n_phi)
    return float(np.sum(f * w)), float(np.sum(np.abs(f) * w))


def _box_sum(dims, d, n, moment, axis):
    lx, ly, lz = dims
    pc = math.atan2(ly, lx)
    # azimuth panels on which a single side wall is hit
    panels = [(-pc, pc), (pc, math.pi - pc), (math.pi - pc, math.pi + pc),
              (math.pi + pc, 2.0 * math.pi - pc)]
    total = 0.0
    scale = 0.0
    for a, b in panels:
        phi, wp = _gl(n, a, b)
        rho_wall = np.minimum(lx / 2.0 / np.maximum(np.abs(np.cos(phi)), 1e-300),
                              ly / 2.0 / np.maximum(np.abs(np.sin(phi)), 1e-300))
        th_top = np.arctan2(rho_wall, lz + d)
        th_rim = np.arctan2(rho_wall, d)
        x, w = np.polynomial.legendre.leggauss(n)
        # piece 1: exits through the top face
        th1 = 0.5 * th_top[:, None] * (x[None, :] + 1.0)
        w1 = 0.5 * th_top[:, None] * w[None, :]
        rad1 = math.log((lz + d) / d) * np.sin(th1) * w1
        # piece 2: exits through the side wall
        th2 = th_top[:, None] + 0.5 * (th_rim - th_top)[:, None] * (x[None, :] + 1.0)
        w2 = 0.5 * (th_rim - th_top)[:, None] * w[None, :]
        rad2 = np.log(rho_wall[:, None] / (d * np.tan(th2))) * np.sin(th2) * w2
        for th, rad in ((th1, rad1), (th2, rad2)):
            f = _angular_factor(np.sin(th), np.cos(th), phi[:, None], moment, axis)
            total += float(np.sum(f * rad * wp[:, None]))
            scale += float(np.sum(np.abs(f * rad) * wp[:, None]))
    return total, scale


def _shape_sum(shape, n, moment, axis):
    d = shape.nv_depth
    if shape.kind == "hemisphere":
        return _hemisphere_sum(shape.extents[0], d, n, moment, axis)
    return _box_sum(shape.box_dims(), d, n, moment, axis)


def geometric_factor(shape, ratio=None, moment=Q1, tol=1e-4, return_info=False):
    """Dimensionless dipolar integral of the sample moment projected on the NV axis.

    Parameters
    ----------
    shape : SampleVolumeShape or str
        A shape, or a shape kind (``"hemisphere"``, ``"cube"``, ``"box"``).
    ratio : float, optional
        V^(1/3)/d_NV; required when ``shape`` is a kind string, otherwise it
        rescales the given shape.
    moment : array_like
        Unit direction of the sample moment (default: in-plane ``Q1``).
    tol : float
        Relative change allowed between the two finest ladder levels.

    Returns
    -------
    float, or (float, dict) when ``return_info`` is set; the dict carries the
    ladder values and the achieved relative change.
    """
    if isinstance(shape, str):
        if ratio is None:
            raise ValueError("ratio: required with a shape kind")
        shape = SampleVolumeShape.from_ratio(shape, ratio)
    elif ratio is not None:
        aspect = shape.box_dims() if shape.kind == "box" else (1.0, 1.0, 1.0)
        shape = SampleVolumeShape.from_ratio(shape.kind, ratio, shape.nv_depth, aspect)
    axis = np.asarray(shape.nv_axis, dtype=float)
    moment = np.asarray(moment, dtype=float)

    values = []
    prev = None
    change = math.inf
    for n in _LADDER:
        val, scale = _shape_sum(shape, n, moment, axis)
        values.append(val)
        if prev is not None:
            change = abs(val - prev) / max(scale, 1e-300)
            if change < tol:
                if return_info:
                    return val, {"ladder": values, "relative_change": change}
                return val
        prev = val
    raise QuadratureError("geometric_factor did not converge", change)


@lru_cache(maxsize=None)
def hemisphere_asymptote():
    """Semi-infinite limit of the hemisphere factor.

    With the radius pushed to infinity the ln(r_exit) term integrates to zero
    over the upper half sphere, leaving the integral of f ln(cos theta).
    """
    moment, axis = Q1, NV_AXIS
    val = None
    for n in (32, 64, 128):
        th, wt = _gl(n, 0.0, math.pi / 2.0)
        phi = np.arange(16) * (2.0 * np.pi / 16)
        s, c = np.sin(th), np.cos(th)
        f = _angular_factor(s[:, None], c[:, None], phi[None, :], moment, axis)
        new = float(np.sum(f * (np.log(c) * s * wt)[:, None]) * (2.0 * np.pi / 16))
        if val is not None and abs(new - val) < 1e-10:
            return new
        val = new
    return val


def mean_signal(b0, temp=300.0, rho=CONSTANTS.rho_water, shape=None, ratio=50.0):
    """Amplitude (T) of the projected field from the precessing thermal magnetization."""
    if shape is None:
        shape = SampleVolumeShape.from_ratio("hemisphere", ratio)
    g = geometric_factor(shape)
    return thermal_field_scale(b0, temp, rho) * abs(g)


def kappa_from_curve(kind="hemisphere", lo=0.5, hi=20.0):
    """V^(1/3)/d_NV ratio at which the geometric factor reaches half its asymptote."""
    if kind == "hemisphere":
        g_inf = abs(hemisphere_asymptote())
    else:
        g_inf = abs(geometric_factor(kind, 1e3))
    return brentq(lambda r: abs(geometric_factor(kind, r)) - 0.5 * g_inf, lo, hi, xtol=1e-6)


# ---------------------------------------------------------------------------
# back-action map


@dataclass
class BackActionMap:
    x: np.ndarray
    y: np.ndarray
    z: float
    factor: np.ndarray
    ladder_change: float = field(default=0.0)

    def stats(self):
        f = self.factor
        return {
            "min": float(f.min()),
            "max": float(f.max()),
            "mean": float(f.mean()),
            "mean_abs": float(np.abs(f).mean()),
            "std": float(f.std()),
        }


def _layer_kspace(layer, z, n_k, n_psi, k_max):
    """Polar k-space nodes and spectral weights of the z-integrated kernel."""
    sx, sy = layer.sigmas
    thick = layer.z_extent[1] - layer.z_extent[0]
    depth_top = -layer.z_extent[1]
    k, wk = _gl(n_k, 0.0, k_max)
    psi = np.arange(n_psi) * (2.0 * np.pi / n_psi)
    kk, pp = np.meshgrid(k, psi, indexing="ij")
    kx, ky = kk * np.cos(pp), kk * np.sin(pp)
    u = NV_AXIS
    profile = 2.0 * np.pi * sx * sy * np.exp(-0.5 * (kx**2 * sx**2 + ky**2 * sy**2))
    angular = (1j * (np.cos(pp) * u[0] + np.sin(pp) * u[1]) - u[2]) ** 2
    h0 = z + depth_top
    radial = np.exp(-kk * h0) - np.exp(-kk * (h0 + thick))
    spec = profile * 2.0 * np.pi * angular * radial
    weight = spec * kk * wk[:, None] * (2.0 * np.pi / n_psi) / (4.0 * np.pi**2)
    return kx.ravel(), ky.ravel(), weight.ravel()


def _map_level(layer, z, x, y, n):
    sx, sy = layer.sigmas
    k_max = 8.6 / min(sx, sy)
    kx, ky, w = _layer_kspace(layer, z, n, 2 * n, k_max)
    ex = np.exp(1j * np.outer(x, kx))
    ey = np.exp(1j * np.outer(y, ky))
    return np.real((ex * w[None, :]) @ ey.T)


def back_action_map(layer, z_plane, x, y, tol=1e-3):
    """Geometric factor of the NV-layer field on a plane ``z_plane`` above the surface.

    The integral of (3 (r.u)^2 - 1)/r^3 over the layer is evaluated as an
    exact 2D Fourier integral (z-integration done analytically), refined on a
    node ladder until the map changes by less than ``tol`` of its peak.
    """
    if z_plane <= 0:
        raise ValueError("z_plane: must be above the surface")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    prev = None
    change = math.inf
    for n in (32, 64, 128, 256):
        cur = _map_level(layer, z_plane, x, y, n)
        if prev is not None:
            peak = max(np.abs(cur).max(), 1e-300)
            change = float(np.abs(cur - prev).max() / peak)
            if change < tol:
                return BackActionMap(x, y, z_plane, cur, change)
        prev = cur
    raise QuadratureError("back_action_map did not converge", change)


def back_action_volume_stats(layer, radius, n_z=16, n_xy=64, z_min=0.1e-6):
    """Volume averages of the factor and of its magnitude over a hemisphere above the spot.

    Returns ``{"mean": ..., "mean_abs": ...}``.
    """
    if radius <= z_min:
        raise ValueError("radius: must exceed z_min")
    zs, wz = _gl(n_z, z_min, radius)
    grid = np.linspace(-radius, radius, n_xy)
    cell = (grid[1] - grid[0]) ** 2
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    total = 0.0
    total_abs = 0.0
    for z, w in zip(zs, wz):
        factor = back_action_map(layer, z, grid, grid).factor
        inside = xx**2 + yy**2 <= radius**2 - z**2
        total += w * cell * float(factor[inside].sum())
        total_abs += w * cell * float(np.abs(factor[inside]).sum())
    volume = HEMISPHERE_VOLUME_COEFF * radius**3
    return {"mean": total / volume, "mean_abs": total_abs / volume}
