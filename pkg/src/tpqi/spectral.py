"""Lorentzian filter transmission and its overlap with a Lorentzian emission line.

Frequencies are in MHz relative to the conversion target unless stated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

DEFAULT_FILTER_FWHM_MHZ = 50.0
NV_NATURAL_FWHM_MHZ = 12.7
QUAD_TOL = 1e-10


@dataclass(frozen=True)
class FilterSpec:
    f0: float = 0.0
    gamma: float = DEFAULT_FILTER_FWHM_MHZ / 2
    I: float = 1.0
    B: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("filter half-width must be positive")
        if not self.I > 0 or self.B < 0:
            raise ValueError("need I > 0 and B >= 0")

    @property
    def fwhm(self) -> float:
        return 2 * self.gamma

    @classmethod
    def from_dict(cls, d: dict) -> FilterSpec:
        return cls(f0=float(d.get("f0_mhz", 0.0)), gamma=float(d.get("gamma_mhz", DEFAULT_FILTER_FWHM_MHZ / 2)),
                   I=float(d.get("peak", 1.0)), B=float(d.get("background", 0.0)))

    def to_dict(self) -> dict:
        return {"f0_mhz": self.f0, "gamma_mhz": self.gamma, "peak": self.I, "background": self.B}


@dataclass(frozen=True)
class EmissionLine:
    f_nv: float = 0.0
    gamma_nv: float = NV_NATURAL_FWHM_MHZ / 2

    def __post_init__(self):
        if not self.gamma_nv > 0:
            raise ValueError("emission half-width must be positive")

    def density(self, f):
        f = np.asarray(f, dtype=float)
        return 1.0 / (math.pi * self.gamma_nv * (1 + ((f - self.f_nv) / self.gamma_nv) ** 2))


@dataclass(frozen=True)
class LockOffsets:
    stabilization_offset: float = 400.0
    reference_detuning: float = 25.0


def transmission(f, spec: FilterSpec):
    f = np.asarray(f, dtype=float)
    out = spec.I / (1 + ((f - spec.f0) / spec.gamma) ** 2) + spec.B
    return out[()] if out.ndim == 0 else out


def frequency_from_transmission(T_meas, spec: FilterSpec):
    """Invert :func:`transmission` on the low-frequency side of the peak.

    ``T_meas`` is the relative transmission ``T(f) / (I + B)`` in
    ``(B / (I + B), 1]``.
    """
    T_meas = np.asarray(T_meas, dtype=float)
    lo = spec.B / (spec.I + spec.B)
    if np.any(T_meas <= lo) or np.any(T_meas > 1):
        raise ValueError(f"relative transmission must lie in ({lo:g}, 1]")
    ratio = spec.I / (T_meas * (spec.I + spec.B) - spec.B)
    out = spec.f0 - spec.gamma * np.sqrt(np.maximum(ratio - 1.0, 0.0))
    return out[()] if out.ndim == 0 else out


def photon_transmission_probability(spec: FilterSpec, line: EmissionLine) -> float:
    """Probability that an emitted photon passes the filter (numeric overlap).

    The filter is treated as a transmission probability with unit peak; its
    ``I`` and ``B`` are ignored.  Substituting ``f = f_nv + gamma_nv*tan(u)``
    turns the emission density into a uniform one on (-pi/2, pi/2), so the
    whole real line is covered by a bounded integrand.
    """
    u_peak = math.atan((spec.f0 - line.f_nv) / line.gamma_nv)

    def integrand(u):
        f = line.f_nv + line.gamma_nv * math.tan(u)
        return 1.0 / (1 + ((f - spec.f0) / spec.gamma) ** 2)

    value, _ = integrate.quad(integrand, -math.pi / 2, math.pi / 2, points=[u_peak],
                              epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=500)
    return float(value / math.pi)


def overlap_closed_form(spec: FilterSpec, line: EmissionLine) -> float:
    """Lorentzian convolution result for the same overlap."""
    g = spec.gamma + line.gamma_nv
    d = spec.f0 - line.f_nv
    return spec.gamma * g / (g * g + d * d)


def transmission_drift(spec: FilterSpec, line: EmissionLine, delta_f: float,
                       max_shift: float = 5.0) -> float:
    """Relative change of the overlap when the filter moves by ``delta_f``."""
    if abs(delta_f) > max_shift:
        raise ValueError(f"|delta_f|={abs(delta_f)} exceeds configured bound {max_shift} MHz")
    centred = photon_transmission_probability(spec, line)
    shifted = photon_transmission_probability(
        FilterSpec(spec.f0 + delta_f, spec.gamma, spec.I, spec.B), line)
    return (shifted - centred) / centred


def pump_frequency(f_excitation, f_target):
    """Difference-frequency relation in GHz: pump = excitation - target."""
    out = np.asarray(f_excitation, dtype=float) - np.asarray(f_target, dtype=float)
    if np.any(out <= 0):
        raise ValueError("excitation frequency must exceed the target frequency")
    return out[()] if out.ndim == 0 else out


def wavelength_to_ghz(wavelength_nm: float) -> float:
    return 299_792_458.0 / wavelength_nm


def transmission_curve(spec: FilterSpec, span_widths: float = 4.0, n: int = 401):
    f = np.linspace(spec.f0 - span_widths * spec.fwhm, spec.f0 + span_widths * spec.fwhm, n)
    return f, transmission(f, spec)
