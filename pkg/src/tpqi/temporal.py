"""Arrival-time-difference shapes of coincidences inside a detection window.

Times are in nanoseconds.  The three pure contributions (emitter-emitter,
emitter-background, background-background) each integrate to 1/2 over
``[-W, W]``; the factor 1/2 is the coincidence probability of two
distinguishable photons on a balanced splitter.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .coincidence import (
    InterferenceParams,
    RateEstimates,
    p_background_background,
    p_cross_emitter,
    p_nv_background,
    p_same_emitter,
)

DEFAULT_LIFETIME_NS = 12.5
DEFAULT_GRID_STEP_NS = 0.1


class EmptyShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionWindow:
    T_start: float
    T_end: float
    tau: float = DEFAULT_LIFETIME_NS

    def __post_init__(self):
        if not 0 < self.T_start < self.T_end:
            raise ValueError(f"need 0 < T_start < T_end, got {self.T_start}, {self.T_end}")
        if not self.tau > 0:
            raise ValueError("lifetime must be positive")

    @property
    def W(self) -> float:
        return self.T_end - self.T_start

    @property
    def emission_fraction(self) -> float:
        """Fraction of an exponential decay (from t=0) falling in the window."""
        return np.exp(-self.T_start / self.tau) - np.exp(-self.T_end / self.tau)

    def to_dict(self) -> dict:
        return {"t_start_ns": self.T_start, "t_end_ns": self.T_end, "tau_ns": self.tau}


def _edges(w: DetectionWindow) -> tuple[float, float]:
    return np.exp(-w.T_start / w.tau), np.exp(-w.T_end / w.tau)


def nv_wavepacket_density(t, w: DetectionWindow):
    """Windowed, normalized emission probability density (per ns)."""
    t = np.asarray(t, dtype=float)
    a, b = _edges(w)
    inside = (t >= w.T_start) & (t <= w.T_end)
    out = np.where(inside, np.exp(-np.where(inside, t, 0.0) / w.tau) / (w.tau * (a - b)), 0.0)
    return out[()] if out.ndim == 0 else out


def g2_nvnv(delta_t, w: DetectionWindow):
    """Two distinguishable emitter photons."""
    x = np.abs(np.asarray(delta_t, dtype=float))
    a, b = _edges(w)
    inside = x <= w.W
    xs = np.where(inside, x, 0.0)
    # e^{-(2Ts+|x|)/tau} - e^{-(2Te-|x|)/tau}, written through a, b to avoid overflow
    val = (a * a * np.exp(-xs / w.tau) - b * b * np.exp(xs / w.tau)) / (4 * w.tau * (a - b) ** 2)
    out = np.where(inside, np.maximum(val, 0.0), 0.0)
    return out[()] if out.ndim == 0 else out


def g2_nvdc(delta_t, w: DetectionWindow):
    """One emitter photon and one uniformly distributed background count."""
    x = np.abs(np.asarray(delta_t, dtype=float))
    a, b = _edges(w)
    inside = x <= w.W
    xs = np.where(inside, x, 0.0)
    num = a - b * np.exp(xs / w.tau) + a * np.exp(-xs / w.tau) - b
    out = np.where(inside, np.maximum(num, 0.0) / (4 * w.W * (a - b)), 0.0)
    return out[()] if out.ndim == 0 else out


def g2_dcdc(delta_t, w: DetectionWindow):
    """Two uniform background counts: a triangle of half-width W."""
    x = np.abs(np.asarray(delta_t, dtype=float))
    out = np.where(x <= w.W, (w.W - np.minimum(x, w.W)) / (2 * w.W ** 2), 0.0)
    return out[()] if out.ndim == 0 else out


def _half_integral_nvnv(u, w):
    a, b = _edges(w)
    return (a * a * w.tau * (1 - np.exp(-u / w.tau))
            - b * b * w.tau * (np.exp(u / w.tau) - 1)) / (4 * w.tau * (a - b) ** 2)


def _half_integral_nvdc(u, w):
    a, b = _edges(w)
    return ((a - b) * u - b * w.tau * (np.exp(u / w.tau) - 1)
            + a * w.tau * (1 - np.exp(-u / w.tau))) / (4 * w.W * (a - b))


def _half_integral_dcdc(u, w):
    return (w.W * u - u * u / 2) / (2 * w.W ** 2)


def _cumulative(half_integral, x, w):
    x = np.clip(np.asarray(x, dtype=float), -w.W, w.W)
    out = 0.25 + np.sign(x) * half_integral(np.abs(x), w)
    return out[()] if out.ndim == 0 else out


def cumulative_nvnv(x, w: DetectionWindow):
    """Integral of :func:`g2_nvnv` from -W to ``x``; reaches 1/2 at ``x = W``."""
    return _cumulative(_half_integral_nvnv, x, w)


def cumulative_nvdc(x, w: DetectionWindow):
    return _cumulative(_half_integral_nvdc, x, w)


def cumulative_dcdc(x, w: DetectionWindow):
    return _cumulative(_half_integral_dcdc, x, w)


@dataclass
class TemporalShape:
    """Weighted sum of the pure contributions on a delta-t grid.

    ``density`` integrates to ``sum(weights) / 2``.  Use
    :meth:`area_normalized` for a unit-area curve or :meth:`count_scaled` to
    express it as expected coincidences per ns.
    """

    delta_t: np.ndarray
    density: np.ndarray
    weights: tuple[float, float, float]
    window: DetectionWindow
    zero_bin: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def total_weight(self) -> float:
        return float(sum(self.weights))

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.delta_t))

    def area_normalized(self) -> np.ndarray:
        if self.total_weight == 0:
            return np.zeros_like(self.density)
        return self.density / (self.total_weight / 2)

    def count_scaled(self, n_coincidences: float) -> np.ndarray:
        return self.area_normalized() * n_coincidences

    def bin_probabilities(self, edges) -> np.ndarray:
        """Exact unit-area probability mass in each delta-t bin."""
        w = self.window
        ww = np.asarray(self.weights, dtype=float)
        cum = (ww[0] * cumulative_nvnv(edges, w) + ww[1] * cumulative_nvdc(edges, w)
               + ww[2] * cumulative_dcdc(edges, w))
        if self.total_weight == 0:
            return np.zeros(len(edges) - 1)
        return np.diff(cum) / (self.total_weight / 2)

    def to_csv(self, fh=None, n_coincidences: float | None = None) -> str:
        buf = io.StringIO() if fh is None else fh
        w_nvnv, w_nvdc, w_dcdc = self.weights
        buf.write(f"# w_nvnv={w_nvnv!r}\n# w_nvdc={w_nvdc!r}\n# w_dcdc={w_dcdc!r}\n")
        buf.write(f"# t_start_ns={self.window.T_start!r}\n# t_end_ns={self.window.T_end!r}\n")
        buf.write(f"# tau_ns={self.window.tau!r}\n# zero_bin={int(self.zero_bin)}\n")
        for key, value in sorted(self.meta.items()):
            buf.write(f"# {key}={value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        header = ["delta_t_ns", "density_per_ns", "area_normalized_per_ns"]
        if n_coincidences is not None:
            header.append("expected_counts_per_ns")
        writer.writerow(header)
        norm = self.area_normalized()
        for i, (x, y) in enumerate(zip(self.delta_t, self.density)):
            row = [f"{x:.6f}", repr(float(y)), repr(float(norm[i]))]
            if n_coincidences is not None:
                row.append(repr(float(norm[i] * n_coincidences)))
            writer.writerow(row)
        return buf.getvalue() if fh is None else ""


def shape_weights(rates: RateEstimates, params: InterferenceParams | None,
                  zero_bin: bool) -> tuple[float, float, float]:
    if zero_bin:
        eta = 0.0 if params is None else params.effective_eta
        w_nvnv = p_cross_emitter(rates) * (1.0 - eta)
    else:
        w_nvnv = p_cross_emitter(rates) + p_same_emitter(rates)
    return (w_nvnv, p_nv_background(rates), p_background_background(rates))


def compose_shape(w: DetectionWindow, rates: RateEstimates, params: InterferenceParams | None = None,
                  zero_bin: bool = False, step: float = DEFAULT_GRID_STEP_NS) -> TemporalShape:
    if sum(shape_weights(rates, None, zero_bin)) <= 0:
        raise EmptyShapeError("all contribution weights are zero")
    # complete suppression by interference is a legitimate all-zero shape
    weights = shape_weights(rates, params, zero_bin)
    n = int(round(2 * w.W / step))
    grid = np.linspace(-w.W, w.W, n + 1)
    density = (weights[0] * g2_nvnv(grid, w) + weights[1] * g2_nvdc(grid, w)
               + weights[2] * g2_dcdc(grid, w))
    return TemporalShape(grid, density, weights, w, zero_bin)
