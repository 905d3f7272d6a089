"""Closed-form coincidence probabilities and visibility extraction.

Coincidences are collected per block of ``PULSES_PER_BLOCK`` excitation
pulses.  A detection in detection bin ``i`` of detector A paired with one in
bin ``j`` of detector B lands in bin difference ``d = j - i``; there are
``10 - |d|`` such (i, j) pairs per block, which is the scaling factor that
multiplies every per-pair probability.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

PULSES_PER_BLOCK = 10
MAX_BIN_DIFFERENCE = PULSES_PER_BLOCK - 1
BIN_DIFFERENCES = np.arange(-MAX_BIN_DIFFERENCE, MAX_BIN_DIFFERENCE + 1)

_REALISTIC_LIMIT = 0.01


class InconsistentInputsError(ValueError):
    """Raised when measured and modelled quantities contradict each other."""


@dataclass(frozen=True)
class RateEstimates:
    """Per-excitation detection probabilities for both emitters and both
    detectors, plus per-window background probabilities.

    ``p1A`` is the probability that a photon from node 1 is detected by
    detector A in one detection window, and so on.
    """

    p1A: float
    p1B: float
    p2A: float
    p2B: float
    pDCA: float
    pDCB: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not (0.0 <= value <= 1.0) or math.isnan(value):
                raise ValueError(f"{name}={value!r} is not a probability")
            if value >= _REALISTIC_LIMIT:
                warnings.warn(
                    f"{name}={value:g} exceeds {_REALISTIC_LIMIT}; single-excitation "
                    "approximations in the coincidence model degrade",
                    stacklevel=3,
                )

    @classmethod
    def symmetric(cls, p1: float, p2: float, pDCA: float, pDCB: float | None = None,
                  split: float = 0.5) -> RateEstimates:
        """Build per-detector rates from per-node aggregates.

        ``split`` is the fraction of each node's aggregate probability
        assigned to *each* detector: 0.5 treats ``p1`` as the sum over both
        detectors, 1.0 treats it as a per-detector value.
        """
        if pDCB is None:
            pDCB = pDCA
        return cls(p1 * split, p1 * split, p2 * split, p2 * split, pDCA, pDCB)

    @classmethod
    def zero(cls) -> RateEstimates:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def as_array(self) -> np.ndarray:
        return np.array([self.p1A, self.p1B, self.p2A, self.p2B, self.pDCA, self.pDCB])

    @classmethod
    def from_array(cls, values) -> RateEstimates:
        return cls(*(float(v) for v in values))

    def scaled(self, factor: float) -> RateEstimates:
        return RateEstimates.from_array(self.as_array() * factor)


RATE_NAMES = ("p1A", "p1B", "p2A", "p2B", "pDCA", "pDCB")


@dataclass(frozen=True)
class InterferenceParams:
    eta: float
    R: float = 0.5
    T: float = 0.5
    apply_beamsplitter: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta={self.eta!r} outside [0, 1]")
        if not (0.0 < self.R < 1.0 and 0.0 < self.T < 1.0) or self.R + self.T > 1.0 + 1e-12:
            raise ValueError(f"invalid beamsplitter R={self.R!r}, T={self.T!r}")

    @property
    def effective_eta(self) -> float:
        """Indistinguishability as seen in the zero bin; the splitter
        imbalance factor is folded in only when requested."""
        if self.apply_beamsplitter:
            return self.eta * beamsplitter_factor(self.R, self.T)
        return self.eta


@dataclass(frozen=True)
class VisibilityResult:
    C_M: float
    C_dist: float
    V: float
    C_E: float | None = None
    N_attempt: int | None = None
    rates: RateEstimates | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "c_m": self.C_M,
            "c_e": self.C_E,
            "c_dist": self.C_dist,
            "visibility": self.V,
            "n_attempt": self.N_attempt,
            "rates": None if self.rates is None else self.rates.as_dict(),
        }


def scaling_factor(d: int) -> int:
    """Number of (bin_A, bin_B) pairs in a block with ``bin_B - bin_A == d``."""
    d = int(d)
    if abs(d) > MAX_BIN_DIFFERENCE:
        raise ValueError(f"bin difference {d} outside [-{MAX_BIN_DIFFERENCE}, {MAX_BIN_DIFFERENCE}]")
    return PULSES_PER_BLOCK - abs(d)


SCALING = np.array([scaling_factor(d) for d in BIN_DIFFERENCES], dtype=float)


def p_cross_emitter(r: RateEstimates) -> float:
    """Photon pairs from different emitters hitting different detectors."""
    return r.p1A * r.p2B + r.p1B * r.p2A


def p_same_emitter(r: RateEstimates) -> float:
    """Pairs from the same emitter in different bins; impossible in the zero bin."""
    return r.p1A * r.p1B + r.p2A * r.p2B


def p_nv_background(r: RateEstimates) -> float:
    return r.pDCA * (r.p1B + r.p2B) + r.pDCB * (r.p1A + r.p2A)


def p_background_background(r: RateEstimates) -> float:
    return r.pDCA * r.pDCB


def p_coinc_nonzero(rates: RateEstimates) -> float:
    """Coincidence probability for one (bin_A, bin_B) pair with bin_A != bin_B.

    Equal to the extrapolated zero-bin probability used by the fit.
    """
    nvnv = p_cross_emitter(rates) + p_same_emitter(rates)
    return nvnv + p_nv_background(rates) + p_background_background(rates)


def p_coinc_zero(rates: RateEstimates, params: InterferenceParams) -> float:
    """Coincidence probability within one detection bin."""
    eta = params.effective_eta
    return (p_cross_emitter(rates) * (1.0 - eta)
            + p_nv_background(rates) + p_background_background(rates))


def p_distinguishable(rates: RateEstimates) -> float:
    return p_coinc_zero(rates, InterferenceParams(0.0))


@dataclass
class BinDifferenceHistogram:
    """Counts (or expected counts) indexed by bin difference -9..9."""

    counts: np.ndarray
    n_blocks: int
    window: object | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.shape != BIN_DIFFERENCES.shape:
            raise ValueError(f"expected {BIN_DIFFERENCES.size} bins, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("negative histogram counts")

    @property
    def d(self) -> np.ndarray:
        return BIN_DIFFERENCES

    def at(self, d: int):
        scaling_factor(d)
        return self.counts[int(d) + MAX_BIN_DIFFERENCE]

    @property
    def n_attempt(self) -> int:
        return PULSES_PER_BLOCK * self.n_blocks

    def per_block(self) -> np.ndarray:
        if self.n_blocks == 0:
            return np.zeros(self.counts.shape)
        return self.counts / self.n_blocks

    def per_attempt(self) -> np.ndarray:
        if self.n_blocks == 0:
            return np.zeros(self.counts.shape)
        return self.counts / self.n_attempt

    def __add__(self, other: BinDifferenceHistogram) -> BinDifferenceHistogram:
        return BinDifferenceHistogram(self.counts + other.counts,
                                      self.n_blocks + other.n_blocks, self.window)


def expected_histogram(rates: RateEstimates, params: InterferenceParams,
                       n_blocks: int) -> BinDifferenceHistogram:
    if n_blocks <= 0:
        raise ValueError("n_blocks must be positive")
    expected = SCALING * p_coinc_nonzero(rates) * n_blocks
    expected[MAX_BIN_DIFFERENCE] = scaling_factor(0) * p_coinc_zero(rates, params) * n_blocks
    return BinDifferenceHistogram(expected, n_blocks)


def correct_extrapolation(C_E: float, rates: RateEstimates, N_attempt: float) -> float:
    """Remove same-emitter pairs from the extrapolated zero-bin count."""
    if C_E < 0:
        raise ValueError("C_E must be non-negative")
    c_dist = C_E - p_same_emitter(rates) * N_attempt
    if c_dist < 0:
        raise InconsistentInputsError(
            f"extrapolated count {C_E:g} is smaller than the same-emitter "
            f"contribution {p_same_emitter(rates) * N_attempt:g}")
    return c_dist


def visibility(C_M: float, C_dist: float, *, C_E: float | None = None,
               N_attempt: int | None = None, rates: RateEstimates | None = None) -> VisibilityResult:
    if not C_dist > 0:
        raise ValueError(f"C_dist must be positive, got {C_dist!r}")
    return VisibilityResult(C_M=C_M, C_dist=C_dist, V=1.0 - C_M / C_dist,
                            C_E=C_E, N_attempt=N_attempt, rates=rates)


def beamsplitter_factor(R: float, T: float) -> float:
    """Scale applied to the indistinguishability by an imbalanced splitter."""
    denom = R * R + T * T
    if denom == 0:
        raise ValueError("R and T cannot both be zero")
    return 1.0 - (R - T) ** 2 / denom
