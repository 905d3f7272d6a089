"""Simulation-based posterior over the indistinguishability.

For each grid value of eta: draw rate parameters from truncated normals,
turn each draw into expected zero-bin counts, draw Poisson realizations, and
count the fraction that match the measurement.  With a uniform prior the
normalized match fractions are the posterior.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coincidence import (
    RateEstimates,
    p_background_background,
    p_cross_emitter,
    p_nv_background,
    p_same_emitter,
)

DEFAULT_GRID = 201
DEFAULT_DRAWS = 1000
DEFAULT_REALIZATIONS = 1000
CI_MASS = 0.68
_KEY_STRIDE = 1 << 31


class InsufficientSamplesError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParameterStats:
    mean: RateEstimates
    std: RateEstimates
    n_attempt: int

    def __post_init__(self):
        if np.any(self.std.as_array() < 0):
            raise ValueError("standard deviations must be non-negative")
        if self.n_attempt <= 0:
            raise ValueError("n_attempt must be positive")

    def to_dict(self) -> dict:
        return {"mean": self.mean.as_dict(), "std": self.std.as_dict(), "n_attempt": self.n_attempt}

    @classmethod
    def from_dict(cls, d: dict) -> ParameterStats:
        return cls(RateEstimates(**d["mean"]), RateEstimates(**d["std"]), int(d["n_attempt"]))


@dataclass(frozen=True)
class Measurement:
    C_M: int
    C_E: float
    C_E_err: float = 0.0

    def __post_init__(self):
        if self.C_M < 0:
            raise ValueError("C_M must be non-negative")
        if not self.C_E > 0:
            raise ValueError("C_E must be positive")


def draw_parameters(stats: ParameterStats, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` parameter vectors from independent normals truncated to [0, 1].

    Out-of-range values are redrawn until none remain.
    """
    mu = stats.mean.as_array()
    sd = stats.std.as_array()
    out = mu + sd * rng.standard_normal((n, mu.size))
    bad = (out < 0) | (out > 1)
    while bad.any():
        rows, cols = np.nonzero(bad)
        out[rows, cols] = mu[cols] + sd[cols] * rng.standard_normal(rows.size)
        bad = (out < 0) | (out > 1)
    return out


def _probabilities(theta: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised zero-bin probabilities: extrapolated (P_E) and measured (P_M)."""
    p1A, p1B, p2A, p2B, dA, dB = theta.T
    cross = p1A * p2B + p1B * p2A
    same = p1A * p1B + p2A * p2B
    nvbg = dA * (p1B + p2B) + dB * (p1A + p2A)
    bg = dA * dB
    return cross + same + nvbg + bg, cross * (1 - eta) + nvbg + bg


def simulate_outcomes(stats: ParameterStats, eta: float, N: int, K: int,
                      seed: int | np.random.SeedSequence) -> tuple[np.ndarray, np.ndarray]:
    """(C_E, C_M) samples of shape (N, K): K Poisson realizations per draw."""
    if N < 1 or K < 1:
        raise ValueError("N and K must be at least 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    rng = np.random.default_rng(ss)
    theta = draw_parameters(stats, N, rng)
    p_e, p_m = _probabilities(theta, eta)
    n = stats.n_attempt
    ce = rng.poisson(np.repeat((p_e * n)[:, None], K, axis=1))
    cm = rng.poisson(np.repeat((p_m * n)[:, None], K, axis=1))
    return ce, cm


def point_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(index),))


def match_tolerance_e(m: Measurement, t_E: float | None) -> float:
    return max(1.0, m.C_E_err) if t_E is None else float(t_E)


def count_matches(ce: np.ndarray, cm: np.ndarray, m: Measurement, t_M: float, t_E: float) -> int:
    return int(((np.abs(cm - m.C_M) <= t_M) & (np.abs(ce - m.C_E) <= t_E)).sum())


def _point_task(args):
    stats, eta, N, K, seed, index, m, t_M, t_E = args
    ce, cm = simulate_outcomes(stats, eta, N, K, point_seed(seed, index))
    return count_matches(ce, cm, m, t_M, t_E)


def make_grid(grid) -> np.ndarray:
    g = np.linspace(0.0, 1.0, int(grid)) if np.ndim(grid) == 0 else np.asarray(grid, dtype=float)
    if g.size < 2 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] > 1:
        raise ValueError("grid must be increasing values in [0, 1]")
    return g


@dataclass
class PosteriorDensity:
    eta: np.ndarray
    density: np.ndarray
    matches: np.ndarray
    samples_per_point: int
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.density.sum()
        if np.any(self.density < 0) or abs(s - 1) > 1e-9:
            raise ValueError("density must be non-negative and sum to 1")

    @property
    def likelihood(self) -> np.ndarray:
        return self.matches / self.samples_per_point


def _density_from_matches(matches: np.ndarray) -> np.ndarray:
    total = matches.sum()
    d = matches / total
    return d / d.sum()


def posterior(grid, stats: ParameterStats, m: Measurement, N: int = DEFAULT_DRAWS,
              K: int = DEFAULT_REALIZATIONS, t_M: float = 0.0, t_E: float | None = None,
              seed: int = 0, workers: int = 1) -> PosteriorDensity:
    g = make_grid(grid)
    if t_M < 0 or (t_E is not None and t_E < 0):
        raise ValueError("tolerances must be non-negative")
    te = match_tolerance_e(m, t_E)
    tasks = [(stats, float(e), N, K, seed, i, m, t_M, te) for i, e in enumerate(g)]
    if workers <= 1:
        matches = np.array([_point_task(t) for t in tasks])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            matches = np.array(list(pool.map(_point_task, tasks)))
    if matches.sum() == 0:
        raise InsufficientSamplesError(
            "no simulated outcome matched the measurement at any grid point; "
            "increase the match tolerance or the number of draws/realizations")
    settings = {"grid": int(g.size), "draws": N, "realizations": K, "t_M": t_M, "t_E": te, "seed": seed}
    return PosteriorDensity(g, _density_from_matches(matches), matches, N * K, settings)


class LikelihoodTable:
    """Simulated (C_E, C_M) pairs per grid point, kept sorted for fast
    repeated matching of many measurements against one simulation."""

    def __init__(self, grid, stats: ParameterStats, N: int, K: int, seed: int = 0):
        self.eta = make_grid(grid)
        self.samples = N * K
        self.keys = []
        for i, e in enumerate(self.eta):
            ce, cm = simulate_outcomes(stats, float(e), N, K, point_seed(seed, i))
            if ce.max(initial=0) >= _KEY_STRIDE:
                raise ValueError("counts too large for the table key")
            self.keys.append(np.sort((cm.astype(np.int64) * _KEY_STRIDE + ce).ravel()))

    def matches(self, m: Measurement, t_M: int = 0, t_E: float | None = None) -> np.ndarray:
        te = match_tolerance_e(m, t_E)
        e_lo = math.ceil(m.C_E - te)
        e_hi = math.floor(m.C_E + te)
        out = np.zeros(self.eta.size, dtype=np.int64)
        if e_hi < e_lo:
            return out
        e_lo = max(e_lo, 0)
        for cm in range(max(0, int(math.ceil(m.C_M - t_M))), int(math.floor(m.C_M + t_M)) + 1):
            lo, hi = cm * _KEY_STRIDE + e_lo, cm * _KEY_STRIDE + e_hi
            for i, k in enumerate(self.keys):
                out[i] += np.searchsorted(k, hi, side="right") - np.searchsorted(k, lo, side="left")
        return out

    def posterior(self, m: Measurement, t_M: int = 0, t_E: float | None = None) -> PosteriorDensity:
        matches = self.matches(m, t_M, t_E)
        if matches.sum() == 0:
            raise InsufficientSamplesError("no simulated outcome matched the measurement")
        return PosteriorDensity(self.eta, _density_from_matches(matches), matches, self.samples,
                                {"t_M": t_M, "t_E": match_tolerance_e(m, t_E)})


@dataclass(frozen=True)
class CredibleInterval:
    map: float
    lo: float
    hi: float
    multimodal: bool = False
    truncated: str | None = None

    def contains(self, eta: float) -> bool:
        return self.lo - 1e-12 <= eta <= self.hi + 1e-12


def map_and_ci(pdf: PosteriorDensity, mass: float = CI_MASS) -> CredibleInterval:
    """MAP and an interval with ``mass / 2`` posterior mass on each side.

    When one side runs into the end of the grid, the interval is pinned there
    and the missing mass is taken from the other side.
    """
    d = pdf.density
    g = pdf.eta
    peak = d.max()
    top = np.flatnonzero(d == peak)
    i = int(top[0])
    # cumulative mass at grid points, each point owning half of its own cell
    f_mid = np.cumsum(d) - d / 2
    c = f_mid[i]
    half = mass / 2
    truncated = None
    if c + half > 1.0 - d[-1] / 2:
        truncated = "upper"
        hi = float(g[-1])
        lo = float(np.interp(max(1.0 - d[-1] / 2 - mass, 0.0), f_mid, g))
    elif c - half < d[0] / 2:
        truncated = "lower"
        lo = float(g[0])
        hi = float(np.interp(min(d[0] / 2 + mass, 1.0), f_mid, g))
    else:
        lo = float(np.interp(c - half, f_mid, g))
        hi = float(np.interp(c + half, f_mid, g))
    lo = min(lo, float(g[i]))
    hi = max(hi, float(g[i]))
    return CredibleInterval(float(g[i]), lo, hi, bool(top.size > 1), truncated)


def stats_from_rates(mean: RateEstimates, std: RateEstimates | None, n_attempt: int) -> ParameterStats:
    return ParameterStats(mean, std if std is not None else RateEstimates.zero(), int(n_attempt))


def expected_counts(stats: ParameterStats, eta: float) -> tuple[float, float]:
    """(C_E, C_M) expected at the parameter means."""
    r = stats.mean
    base = p_cross_emitter(r)
    rest = p_nv_background(r) + p_background_background(r)
    n = stats.n_attempt
    return (base + p_same_emitter(r) + rest) * n, (base * (1 - eta) + rest) * n

