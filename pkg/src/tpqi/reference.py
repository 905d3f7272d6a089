"""Measured window-length sweep used as a reference dataset.

Each row holds, for one analysis window length, the per-node detection
probabilities (aggregate over detectors), per-detector background
probabilities, the measured zero-bin coincidences and the corrected
distinguishable expectation, all with one-sigma uncertainties.
"""

from __future__ import annotations

from dataclasses import dataclass

from .coincidence import RateEstimates, p_distinguishable, p_same_emitter

# Total excitation attempts over the whole measurement.
TOTAL_REPETITIONS = 282_226_000_000
HEADLINE_VISIBILITY = (0.79, 0.03)


@dataclass(frozen=True)
class WindowRow:
    window_ns: float
    p1: float
    p1_err: float
    p2: float
    p2_err: float
    pDCA: float
    pDCA_err: float
    pDCB: float
    pDCB_err: float
    C_M: int
    C_M_err: float
    C_dist: float
    C_dist_err: float

    def rates(self, split: float = 0.5) -> RateEstimates:
        return RateEstimates.symmetric(self.p1, self.p2, self.pDCA, self.pDCB, split=split)

    def rate_errors(self, split: float = 0.5) -> RateEstimates:
        return RateEstimates.symmetric(self.p1_err, self.p2_err, self.pDCA_err, self.pDCB_err,
                                       split=split)

    def effective_attempts(self, split: float = 0.5) -> float:
        """Attempts for which the model's distinguishable expectation
        equals the tabulated ``C_dist``."""
        return self.C_dist / p_distinguishable(self.rates(split))

    def extrapolated_count(self, split: float = 0.5) -> float:
        """C_E implied by ``C_dist`` under the effective attempt count."""
        n = self.effective_attempts(split)
        return self.C_dist + p_same_emitter(self.rates(split)) * n

    def attempts_consistent(self, split: float = 0.5) -> bool:
        """Two-node attempts cannot exceed the total repetitions."""
        return self.effective_attempts(split) <= TOTAL_REPETITIONS


def _row(w, p1, p2, dca, dcb, cm, cd):
    return WindowRow(
        window_ns=float(w),
        p1=p1[0] * 1e-5, p1_err=p1[1] * 1e-5,
        p2=p2[0] * 1e-5, p2_err=p2[1] * 1e-5,
        pDCA=dca[0] * 1e-6, pDCA_err=dca[1] * 1e-6,
        pDCB=dcb[0] * 1e-6, pDCB_err=dcb[1] * 1e-6,
        C_M=cm[0], C_M_err=float(cm[1]),
        C_dist=cd[0], C_dist_err=cd[1],
    )


WINDOW_SWEEP: tuple[WindowRow, ...] = (
    _row(6, (2.1, 0.4), (1.4, 0.4), (0.84, 0.1), (0.84, 0.1), (13, 4), (92.37, 0.32)),
    _row(8, (2.7, 0.4), (1.8, 0.4), (1.12, 0.15), (1.12, 0.13), (19, 4), (154.7, 0.4)),
    _row(10, (3.2, 0.4), (2.1, 0.4), (1.40, 0.19), (1.40, 0.17), (30, 5), (221.7, 0.5)),
    _row(12, (3.7, 0.4), (2.4, 0.4), (1.67, 0.22), (1.68, 0.20), (37, 6), (297.9, 0.6)),
    _row(14, (4.1, 0.4), (2.7, 0.4), (1.95, 0.26), (1.96, 0.23), (44, 7), (367.6, 0.6)),
    _row(16, (4.4, 0.4), (2.9, 0.4), (2.23, 0.30), (2.24, 0.27), (53, 7), (436.9, 0.7)),
    _row(18, (4.7, 0.4), (3.1, 0.4), (2.51, 0.34), (2.52, 0.30), (74, 9), (496.5, 0.7)),
    _row(20, (5.0, 0.4), (3.2, 0.4), (2.8, 0.4), (2.79, 0.33), (93, 10), (558.9, 0.8)),
    _row(22, (5.2, 0.4), (3.4, 0.4), (3.1, 0.4), (3.1, 0.4), (103, 10), (611.1, 0.8)),
    _row(24, (5.4, 0.4), (3.5, 0.4), (3.3, 0.4), (3.4, 0.4), (118, 11), (662.9, 0.9)),
    _row(26, (5.5, 0.4), (3.6, 0.4), (3.6, 0.5), (3.6, 0.4), (133, 12), (708.5, 0.9)),
    _row(28, (5.7, 0.4), (3.7, 0.4), (3.9, 0.5), (3.9, 0.5), (148, 12), (749.5, 0.9)),
    _row(30, (5.8, 0.4), (3.7, 0.4), (4.2, 0.6), (4.2, 0.5), (159, 13), (785.7, 0.9)),
)


def row_for_window(window_ns: float) -> WindowRow:
    for row in WINDOW_SWEEP:
        if row.window_ns == window_ns:
            return row
    raise KeyError(f"no reference row for window length {window_ns} ns")
