"""From a tag stream to a visibility: alignment, burst filtering, coincidence
records, bin-difference histograms, rate estimates and the zero-bin
extrapolation.

The stream is processed in pieces that never split a block (simulator chunks
or file pieces cut at heartbeat tags).  Each piece is mapped to additive
partial sums; the reduction adds them in piece order, so results do not
depend on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import stats

from .coincidence import (
    BIN_DIFFERENCES,
    MAX_BIN_DIFFERENCE,
    PULSES_PER_BLOCK,
    SCALING,
    BinDifferenceHistogram,
    InconsistentInputsError,
    InterferenceParams,
    RateEstimates,
    correct_extrapolation,
    p_coinc_zero,
    visibility,
)
from .sequence import BlockKind, Channel, SequenceConfig, TagStream
from .tagio import NO_DETECTION, RECORD_DTYPE, records_from_columns
from .temporal import DEFAULT_LIFETIME_NS, DetectionWindow

BURST_SPAN_NS = 160.0
BURST_MAX_EVENTS = 2
DEFAULT_TAIL_NS = (100.0, 200.0)
SINGLES_HIST_BIN_NS = 0.4
MIN_SBR_EVENTS = 10_000


class StreamIntegrityError(ValueError):
    pass


class EstimationError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class EventClass:
    BETWEEN_BLOCKS = 0
    IN_BIN_OUTSIDE_WINDOW = 1
    IN_WINDOW = 2


@dataclass
class AlignedTable:
    """Blocks found from markers and every detector event placed in them.

    Block arrays are indexed by local block number (0-based within the
    piece).  Event ``block``/``bin``/``rel_ticks`` are -1 for events outside
    every block.
    """

    block_start: np.ndarray
    node1_ts: np.ndarray
    node2_ts: np.ndarray
    kind: np.ndarray
    det: np.ndarray
    timestamp: np.ndarray
    block: np.ndarray
    bin: np.ndarray
    rel_ticks: np.ndarray
    tick_ns: float
    spacing_ticks: int
    duration_ticks: int = 0
    truth_pulse: np.ndarray | None = None

    @property
    def n_blocks(self) -> int:
        return int(self.block_start.size)

    @property
    def in_block(self) -> np.ndarray:
        return self.block >= 0

    def classify(self, window: DetectionWindow | None = None) -> np.ndarray:
        klass = np.where(self.in_block, EventClass.IN_BIN_OUTSIDE_WINDOW, EventClass.BETWEEN_BLOCKS)
        if window is not None:
            klass = np.where(self.in_block & self.in_window(window), EventClass.IN_WINDOW, klass)
        return klass

    def in_window(self, window: DetectionWindow) -> np.ndarray:
        rel_ns = self.rel_ticks * self.tick_ns
        return self.in_block & (rel_ns >= window.T_start) & (rel_ns < window.T_end)


def _pair_markers(m1: np.ndarray, m2: np.ndarray, tol: int, allow_single: bool):
    """Match node markers; returns (block_start, node1_ts, node2_ts, kind)."""
    t = np.concatenate([m1, m2]).astype(np.int64)
    node = np.concatenate([np.ones(m1.size, np.int8), np.full(m2.size, 2, np.int8)])
    order = np.lexsort((node, t))
    t, node = t[order], node[order]
    n = t.size
    # same-node markers are at least a block span apart and tol < span / 2,
    # so close cross-node neighbours never chain
    pair = np.zeros(n, dtype=bool)
    if n > 1:
        pair[:-1] = (np.diff(t) <= tol) & (node[1:] != node[:-1])
    first = np.ones(n, dtype=bool)
    first[1:] = ~pair[:-1]
    starts_idx = np.flatnonzero(first)
    single = ~pair[starts_idx]
    if single.any() and not allow_single:
        j = starts_idx[np.argmax(single)]
        missing = 2 if node[j] == 1 else 1
        raise StreamIntegrityError(
            f"marker of node {node[j]} at tick {t[j]} (marker #{j}) has no node {missing} partner")
    n1 = np.zeros(starts_idx.size, dtype=np.uint64)
    n2 = np.zeros(starts_idx.size, dtype=np.uint64)
    kind = np.full(starts_idx.size, BlockKind.JOINT, dtype=np.int8)
    a = starts_idx
    b = np.minimum(starts_idx + 1, n - 1)
    na = node[a]
    ta = t[a]
    tb = t[b]
    is_pair = pair[a]
    n1[:] = np.where(na == 1, ta, np.where(is_pair, tb, 0))
    n2[:] = np.where(na == 2, ta, np.where(is_pair, tb, 0))
    kind[~is_pair & (na == 1)] = BlockKind.NODE1
    kind[~is_pair & (na == 2)] = BlockKind.NODE2
    block_start = np.where(is_pair, np.minimum(ta, tb), ta)
    return block_start.astype(np.int64), n1, n2, kind


def align(stream: TagStream, cfg: SequenceConfig, *, allow_single_node: bool | None = None,
          marker_tolerance_ticks: int = 125) -> AlignedTable:
    """Place each detector tag in (block, detection bin, offset in bin).

    Each block starts at its experiment marker (the first pulse).  Single-node
    blocks are accepted only when ``allow_single_node`` (default: the config
    has calibration rounds enabled).
    """
    if cfg.pulses_per_block != PULSES_PER_BLOCK:
        raise StreamIntegrityError(f"analysis needs {PULSES_PER_BLOCK} pulses per block")
    if allow_single_node is None:
        allow_single_node = cfg.calibration_interval > 0
    if not 0 <= marker_tolerance_ticks < cfg.block_span_ticks // 2:
        raise StreamIntegrityError("marker tolerance must be below half a block span")
    ch = stream.channels
    m1 = stream.timestamps[ch == Channel.MARKER_NODE1].astype(np.int64)
    m2 = stream.timestamps[ch == Channel.MARKER_NODE2].astype(np.int64)
    span = cfg.block_span_ticks
    for name, m in (("node 1", m1), ("node 2", m2)):
        if m.size > 1:
            gaps = np.diff(m)
            bad = np.flatnonzero(gaps < span)
            if bad.size:
                j = int(bad[0]) + 1
                raise StreamIntegrityError(
                    f"duplicated {name} marker at tick {m[j]} (marker #{j}): "
                    f"{gaps[bad[0]]} ticks after the previous one, block span is {span}")
    start, n1, n2, kind = _pair_markers(m1, m2, marker_tolerance_ticks, allow_single_node)
    if start.size > 1:
        bad = np.flatnonzero(np.diff(start) < span)
        if bad.size:
            j = int(bad[0]) + 1
            raise StreamIntegrityError(f"block at tick {start[j]} (block #{j}) overlaps the previous block")

    detm = (ch == Channel.DET_A) | (ch == Channel.DET_B)
    t = stream.timestamps[detm].astype(np.int64)
    det = ch[detm].astype(np.int8)
    blk = np.searchsorted(start, t, side="right") - 1
    rel = t - start[np.maximum(blk, 0)]
    inside = (blk >= 0) & (rel < span) & (rel >= 0)
    blk = np.where(inside, blk, -1)
    spacing = cfg.spacing_ticks
    bin_ = np.where(inside, rel // spacing, -1)
    rel_in_bin = np.where(inside, rel - bin_ * spacing, -1)
    duration = int(stream.timestamps[-1] - stream.timestamps[0]) if len(stream) > 1 else 0
    truth = stream.pulse_index[detm] if stream.pulse_index is not None else None
    return AlignedTable(start, n1, n2, kind, det, t, blk.astype(np.int64), bin_.astype(np.int64),
                        rel_in_bin.astype(np.int64), cfg.tick_ns, spacing, duration, truth)


def burst_flags(aligned: AlignedTable, span_ns: float = BURST_SPAN_NS,
                max_events: int = BURST_MAX_EVENTS) -> np.ndarray:
    """Blocks where both detectors see more than ``max_events`` tags in one span."""
    span = span_ns / aligned.tick_ns
    flagged = []
    for d in (Channel.DET_A, Channel.DET_B):
        m = (aligned.det == d) & aligned.in_block
        b = aligned.block[m]
        t = aligned.timestamp[m]
        hit = np.zeros(aligned.n_blocks, dtype=bool)
        k = max_events
        if t.size > k:
            ok = (b[k:] == b[:-k]) & ((t[k:] - t[:-k]) < span)
            hit[b[:-k][ok]] = True
        flagged.append(hit)
    return flagged[0] & flagged[1]


def poisson_tail(lam: float, k: int = BURST_MAX_EVENTS) -> float:
    """P(C > k) for C ~ Poisson(lam)."""
    return float(stats.poisson.sf(k, lam))


def expected_false_removals(rate_a_hz: float, rate_b_hz: float, n_attempts: int,
                            span_ns: float = BURST_SPAN_NS) -> float:
    """Expected blocks removed by chance coincidence of two singles tails."""
    pa = poisson_tail(rate_a_hz * span_ns * 1e-9)
    pb = poisson_tail(rate_b_hz * span_ns * 1e-9)
    return n_attempts * pa * pb


@dataclass
class BurstFilterResult:
    kept: np.ndarray
    removed: int
    expected_false_removals: float
    singles_rate_hz: tuple[float, float]

    @property
    def removed_fraction(self) -> float:
        n = self.kept.size
        return self.removed / n if n else 0.0


def burst_filter(aligned: AlignedTable, span_ns: float = BURST_SPAN_NS) -> BurstFilterResult:
    flags = burst_flags(aligned, span_ns)
    dur_s = aligned.duration_ticks * aligned.tick_ns * 1e-9
    rates = tuple(float((aligned.det == d).sum() / dur_s) if dur_s > 0 else 0.0
                  for d in (Channel.DET_A, Channel.DET_B))
    n_att = aligned.n_blocks * PULSES_PER_BLOCK
    return BurstFilterResult(~flags, int(flags.sum()), expected_false_removals(*rates, n_att, span_ns), rates)


def emit_records(aligned: AlignedTable, window: DetectionWindow, kept: np.ndarray | None = None,
                 trigger_offset: int = 0) -> np.ndarray:
    """One record per (block, detection bin) holding at least one in-window tag.

    Counts are the number of in-window tags per detector; the relative
    timestamp is that of the earliest one, or ``NO_DETECTION``.
    """
    m = aligned.in_window(window)
    if kept is not None:
        m &= kept[np.maximum(aligned.block, 0)]
    blk, bin_, det, rel = aligned.block[m], aligned.bin[m], aligned.det[m], aligned.rel_ticks[m]
    if blk.size == 0:
        return np.zeros(0, dtype=RECORD_DTYPE)
    key = blk * PULSES_PER_BLOCK + bin_
    uniq, inv = np.unique(key, return_inverse=True)
    cols = {}
    for d, name in ((Channel.DET_A, "detA"), (Channel.DET_B, "detB")):
        sel = det == d
        cols[f"{name}_counts"] = np.bincount(inv[sel], minlength=uniq.size)
        first = np.full(uniq.size, np.iinfo(np.int64).max)
        np.minimum.at(first, inv[sel], rel[sel])
        cols[f"{name}_relative_timestamp"] = np.where(cols[f"{name}_counts"] > 0, first, NO_DETECTION)
    ub = uniq // PULSES_PER_BLOCK
    return records_from_columns(
        trigger_index=(ub + trigger_offset).astype(np.uint64),
        node1_trigger_timestamp=aligned.node1_ts[ub],
        node2_trigger_timestamp=aligned.node2_ts[ub],
        detection_bin_index=(uniq % PULSES_PER_BLOCK).astype(np.uint32),
        **cols)


def histogram(records: np.ndarray, n_blocks: int, window: DetectionWindow | None = None,
              joint_only: bool = True) -> BinDifferenceHistogram:
    """Cross-detector pairs per block, indexed by ``bin_B - bin_A``.

    Records from single-node rounds (a zero trigger timestamp) are skipped
    unless ``joint_only`` is False.
    """
    r = records
    if joint_only and r.size:
        r = r[(r["node1_trigger_timestamp"] > 0) & (r["node2_trigger_timestamp"] > 0)]
    counts = np.zeros(BIN_DIFFERENCES.size, dtype=np.int64)
    a = r[r["detA_counts"] > 0]
    b = r[r["detB_counts"] > 0]
    if a.size and b.size:
        ta, tb = a["trigger_index"], b["trigger_index"]
        lo = np.searchsorted(tb, ta, side="left")
        hi = np.searchsorted(tb, ta, side="right")
        n = hi - lo
        if n.sum():
            ia = np.repeat(np.arange(a.size), n)
            ib = np.concatenate([np.arange(l, h) for l, h in zip(lo, hi) if h > l])
            d = b["detection_bin_index"][ib].astype(np.int64) - a["detection_bin_index"][ia].astype(np.int64)
            w = a["detA_counts"][ia].astype(np.int64) * b["detB_counts"][ib].astype(np.int64)
            counts += np.bincount(d + MAX_BIN_DIFFERENCE, weights=w, minlength=BIN_DIFFERENCES.size).astype(np.int64)
    return BinDifferenceHistogram(counts, n_blocks, window)


@dataclass
class FitResult:
    C_E: float
    C_E_err: float
    slope: float
    intercept: float = 0.0
    residual_err: float = 0.0
    poisson_err: float = 0.0


def fit_extrapolate(h: BinDifferenceHistogram, intercept: bool = False, min_bins: int = 4) -> FitResult:
    """Least squares of counts against s(d) over d != 0; C_E is the fit at s = 10.

    The uncertainty is the larger of the residual-based standard error and the
    Poisson error of the summed counts.
    """
    nz = BIN_DIFFERENCES != 0
    x = SCALING[nz]
    y = np.asarray(h.counts, dtype=float)[nz]
    if int((y > 0).sum()) < min_bins:
        raise DegenerateFitError(f"fewer than {min_bins} populated non-zero bin differences")
    s0 = float(PULSES_PER_BLOCK)
    if intercept:
        A = np.stack([np.ones_like(x), x], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        dof = max(x.size - 2, 1)
        cov = np.linalg.inv(A.T @ A) * (resid @ resid) / dof
        g = np.array([1.0, s0])
        ce = float(coef[0] + s0 * coef[1])
        res_err = float(math.sqrt(g @ cov @ g))
        a0, slope = float(coef[0]), float(coef[1])
    else:
        sxx = float(x @ x)
        slope = float(x @ y) / sxx
        resid = y - slope * x
        res_err = s0 * math.sqrt(float(resid @ resid) / (x.size - 1) / sxx)
        ce = s0 * slope
        a0 = 0.0
    # Poisson: var(slope) = sum(x^2 var y) / sxx^2 with var y = slope * x
    pois_err = s0 * math.sqrt(max(slope, 0.0) * float((x ** 3).sum())) / float(x @ x)
    return FitResult(ce, max(res_err, pois_err), slope, a0, res_err, pois_err)


@dataclass
class RateCounts:
    """Additive counts from which rates are estimated."""

    pulses: dict = field(default_factory=lambda: {k: 0 for k in BlockKind})
    in_window: dict = field(default_factory=lambda: {(k, d): 0 for k in BlockKind for d in (0, 1)})
    tail: dict = field(default_factory=lambda: {0: 0, 1: 0})
    tail_pulses: int = 0

    def __add__(self, o: RateCounts) -> RateCounts:
        r = RateCounts()
        for k in r.pulses:
            r.pulses[k] = self.pulses[k] + o.pulses[k]
        for k in r.in_window:
            r.in_window[k] = self.in_window[k] + o.in_window[k]
        for k in r.tail:
            r.tail[k] = self.tail[k] + o.tail[k]
        r.tail_pulses = self.tail_pulses + o.tail_pulses
        return r


def rate_counts(aligned: AlignedTable, window: DetectionWindow, kept: np.ndarray | None = None,
                tail_ns: tuple[float, float] = DEFAULT_TAIL_NS) -> RateCounts:
    rc = RateCounts()
    keep = np.ones(aligned.n_blocks, dtype=bool) if kept is None else kept
    for k in BlockKind:
        rc.pulses[k] = int(((aligned.kind == k) & keep).sum()) * PULSES_PER_BLOCK
    ev_keep = aligned.in_block & keep[np.maximum(aligned.block, 0)]
    win = aligned.in_window(window) & ev_keep
    kind = aligned.kind[np.maximum(aligned.block, 0)]
    for k in BlockKind:
        for d in (0, 1):
            rc.in_window[(k, d)] = int((win & (kind == k) & (aligned.det == d)).sum())
    rel_ns = aligned.rel_ticks * aligned.tick_ns
    tail = ev_keep & (rel_ns >= tail_ns[0]) & (rel_ns < tail_ns[1])
    for d in (0, 1):
        rc.tail[d] = int((tail & (aligned.det == d)).sum())
    rc.tail_pulses = int(keep.sum()) * PULSES_PER_BLOCK
    return rc


@dataclass
class RateEstimate:
    mean: RateEstimates
    stderr: RateEstimates
    source: str

    def to_dict(self) -> dict:
        return {"mean": self.mean.as_dict(), "stderr": self.stderr.as_dict(), "source": self.source}


def estimate_rates(counts: RateCounts, window: DetectionWindow,
                   tail_ns: tuple[float, float] = DEFAULT_TAIL_NS) -> RateEstimate:
    """Per-node, per-detector in-window probabilities from single-node rounds.

    Background per window comes from the late part of each detection bin,
    scaled by the window length.  Negative differences are clipped at zero.
    """
    n1, n2 = counts.pulses[BlockKind.NODE1], counts.pulses[BlockKind.NODE2]
    if n1 == 0 or n2 == 0:
        raise EstimationError("no single-node rounds to estimate detection probabilities from")
    tail_len = tail_ns[1] - tail_ns[0]
    scale = window.W / tail_len
    bg, bg_err = [], []
    for d in (0, 1):
        n = counts.tail[d]
        bg.append(n / counts.tail_pulses * scale)
        bg_err.append(math.sqrt(max(n, 1)) / counts.tail_pulses * scale)
    means, errs = [], []
    for kind, n_p in ((BlockKind.NODE1, n1), (BlockKind.NODE2, n2)):
        for d in (0, 1):
            c = counts.in_window[(kind, d)]
            means.append(max(c / n_p - bg[d], 0.0))
            errs.append(math.hypot(math.sqrt(max(c, 1)) / n_p, bg_err[d]))
    mean = RateEstimates(*means, *bg)
    err = RateEstimates(*errs, *bg_err)
    return RateEstimate(mean, err, "single-node rounds")


@dataclass
class SinglesHistogram:
    counts: np.ndarray  # shape (2, n_bins) per detector
    bin_ns: float
    pulses: int

    def __add__(self, o: SinglesHistogram) -> SinglesHistogram:
        return SinglesHistogram(self.counts + o.counts, self.bin_ns, self.pulses + o.pulses)

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.counts.shape[1] + 1) * self.bin_ns


def singles_histogram(aligned: AlignedTable, spacing_ns: float, kept: np.ndarray | None = None,
                      bin_ns: float = SINGLES_HIST_BIN_NS) -> SinglesHistogram:
    n_bins = int(round(spacing_ns / bin_ns))
    keep = np.ones(aligned.n_blocks, dtype=bool) if kept is None else kept
    m = aligned.in_block & keep[np.maximum(aligned.block, 0)] & (aligned.kind[np.maximum(aligned.block, 0)] == BlockKind.JOINT)
    idx = np.minimum((aligned.rel_ticks[m] * aligned.tick_ns / bin_ns).astype(np.int64), n_bins - 1)
    det = aligned.det[m]
    counts = np.stack([np.bincount(idx[det == d], minlength=n_bins) for d in (0, 1)])
    pulses = int(((aligned.kind == BlockKind.JOINT) & keep).sum()) * PULSES_PER_BLOCK
    return SinglesHistogram(counts, bin_ns, pulses)


@dataclass
class SbrCurve:
    t_ns: np.ndarray
    signal: np.ndarray
    background: np.ndarray
    ratio: np.ndarray
    window: DetectionWindow
    unbounded: bool
    threshold: float

    def to_dict(self) -> dict:
        return {"t_start_ns": self.window.T_start, "t_end_ns": self.window.T_end,
                "unbounded": self.unbounded, "threshold": self.threshold,
                "background_per_ns": self.background.mean(axis=1).tolist()}


def sbr_curve(h: SinglesHistogram, *, tau: float = DEFAULT_LIFETIME_NS, threshold: float = 10.0,
              tail_ns: tuple[float, float] = DEFAULT_TAIL_NS, leak_fraction: float = 0.1,
              fit_range_ns: tuple[float, float] = (5.0, 40.0),
              min_events: int = MIN_SBR_EVENTS) -> SbrCurve:
    """Pointwise signal-to-background per detector and a recommended window.

    Background is the flat level in ``tail_ns`` after removing the emitter's
    own exponential tail there; a tail consistent with the emitter alone
    means no measurable background (``unbounded``).  The window starts where
    the excess over a fixed-lifetime exponential drops below
    ``leak_fraction`` of the emitter signal, and ends at the latest time for
    which the window-averaged ratio (both detectors summed) still exceeds
    ``threshold``.
    """
    total = int(h.counts.sum())
    if total < min_events:
        raise InsufficientDataError(f"singles histogram has {total} events, need {min_events}")
    edges = h.edges
    t = 0.5 * (edges[:-1] + edges[1:])
    tail = (t >= tail_ns[0]) & (t < tail_ns[1])
    fit = (t >= fit_range_ns[0]) & (t < fit_range_ns[1])
    shape = np.exp(-t / tau)
    counts = h.counts.astype(float)
    n_tail = counts[:, tail].sum(axis=1)
    bg_level = n_tail / tail.sum()
    nv_tail = np.zeros(2)
    for _ in range(3):
        amp = np.maximum((counts[:, fit] - bg_level[:, None]).sum(axis=1), 0.0) / shape[fit].sum()
        nv_tail = amp * shape[tail].sum()
        bg_level = np.maximum(n_tail - nv_tail, 0.0) / tail.sum()
    unbounded = bool(np.all(n_tail <= nv_tail + 3 * np.sqrt(nv_tail) + 1))
    if unbounded:
        bg_level = np.zeros(2)
    background = np.repeat(bg_level[:, None], t.size, axis=1)
    signal = counts - background
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(background > 0, signal / background,
                         np.where(signal > 0, np.inf, np.nan))

    sig = signal.sum(axis=0)
    bgs = background.sum(axis=0)
    amp = sig[fit].sum() / shape[fit].sum()
    nv = amp * shape
    excess = sig - nv
    ok = excess < leak_fraction * np.maximum(nv, 1e-300)
    start_i = int(np.argmax(ok)) if ok.any() else 0
    t_start = float(edges[start_i]) if start_i > 0 else float(edges[1] * 0.5)
    if unbounded:
        t_end = float(edges[-1])
    else:
        cs = np.cumsum(sig[start_i:])
        cb = np.cumsum(bgs[start_i:])
        good = np.flatnonzero(cs > threshold * cb)
        t_end = float(edges[start_i + good[-1] + 1]) if good.size else float(edges[start_i + 1])
    window = DetectionWindow(max(t_start, 1e-9), t_end, tau)
    return SbrCurve(t, signal, background, ratio, window, unbounded, threshold)


# ---------------------------------------------------------------------------
# map-reduce driver


@dataclass
class WindowPartial:
    hist: np.ndarray
    n_joint: int
    rates: RateCounts
    records: np.ndarray

    def __add__(self, o: WindowPartial) -> WindowPartial:
        return WindowPartial(self.hist + o.hist, self.n_joint + o.n_joint, self.rates + o.rates,
                             np.concatenate([self.records, o.records]))


@dataclass
class Partial:
    n_blocks: int
    n_joint_total: int
    removed: int
    n_between: int
    n_detector_events: tuple[int, int]
    duration_ticks: int
    windows: list[WindowPartial]
    singles: SinglesHistogram
    raw_tags: int

    def __add__(self, o: Partial) -> Partial:
        shifted = []
        for a, b in zip(self.windows, o.windows):
            rec = b.records.copy()
            rec["trigger_index"] += np.uint64(self.n_blocks)
            shifted.append(a + WindowPartial(b.hist, b.n_joint, b.rates, rec))
        return Partial(self.n_blocks + o.n_blocks, self.n_joint_total + o.n_joint_total,
                       self.removed + o.removed, self.n_between + o.n_between,
                       tuple(x + y for x, y in zip(self.n_detector_events, o.n_detector_events)),
                       self.duration_ticks + o.duration_ticks, shifted, self.singles + o.singles,
                       self.raw_tags + o.raw_tags)


def map_piece(args) -> Partial:
    stream, cfg, windows, keep_records = args
    aligned = align(stream, cfg)
    bf = burst_filter(aligned)
    kept = bf.kept
    joint_kept = int(((aligned.kind == BlockKind.JOINT) & kept).sum())
    parts = []
    for w in windows:
        rec = emit_records(aligned, w, kept)
        h = histogram(rec, joint_kept, w)
        parts.append(WindowPartial(h.counts, joint_kept, rate_counts(aligned, w, kept),
                                   rec if keep_records else np.zeros(0, RECORD_DTYPE)))
    ev = tuple(int((aligned.det == d).sum()) for d in (0, 1))
    return Partial(aligned.n_blocks, int((aligned.kind == BlockKind.JOINT).sum()), bf.removed,
                   int((~aligned.in_block).sum()), ev, aligned.duration_ticks, parts,
                   singles_histogram(aligned, cfg.pulse_spacing_ns, kept), len(stream))


def empty_partial(cfg: SequenceConfig, windows) -> Partial:
    n_bins = int(round(cfg.pulse_spacing_ns / SINGLES_HIST_BIN_NS))
    return Partial(0, 0, 0, 0, (0, 0), 0,
                   [WindowPartial(np.zeros(BIN_DIFFERENCES.size, np.int64), 0, RateCounts(),
                                  np.zeros(0, RECORD_DTYPE)) for _ in windows],
                   SinglesHistogram(np.zeros((2, n_bins), np.int64), SINGLES_HIST_BIN_NS, 0), 0)


def map_reduce(pieces: Iterable[TagStream], cfg: SequenceConfig, windows: list[DetectionWindow],
               workers: int = 1, keep_records: bool = True) -> Partial:
    total = empty_partial(cfg, windows)
    tasks = ((p, cfg, windows, keep_records) for p in pieces)
    if workers <= 1:
        for part in map(map_piece, tasks):
            total = total + part
        return total
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(map_piece, tasks, chunksize=2):
            total = total + part
    return total


def _propagated_expectation_err(rates: RateEstimates, errs: RateEstimates, n_attempt: int) -> float:
    base = rates.as_array()
    sig = errs.as_array()
    p0 = p_coinc_zero(rates, InterferenceParams(0.0))
    var = 0.0
    for j in range(base.size):
        if sig[j] == 0:
            continue
        step = max(sig[j] * 1e-3, 1e-15)
        v = base.copy()
        v[j] += step
        with np.errstate(all="ignore"):
            g = (p_coinc_zero(RateEstimates.from_array(np.clip(v, 0, 1)), InterferenceParams(0.0)) - p0) / step
        var += (g * sig[j]) ** 2
    return math.sqrt(var) * n_attempt


def window_report(part: WindowPartial, window: DetectionWindow, rates: RateEstimate | None) -> dict:
    h = BinDifferenceHistogram(part.hist, part.n_joint, window)
    out = {
        "window": window.to_dict(),
        "n_blocks": part.n_joint,
        "n_attempt": h.n_attempt,
        "histogram": {
            "d": BIN_DIFFERENCES.tolist(),
            "counts": [int(c) for c in h.counts],
            "per_block": h.per_block().tolist(),
            "per_attempt": h.per_attempt().tolist(),
        },
        "n_records": int(part.records.size),
        "c_m": int(h.at(0)),
        "rates": None if rates is None else rates.to_dict(),
        "c_e": None, "c_e_err": None, "c_dist": None, "c_dist_err": None, "visibility": None,
        "visibility_err": None, "self_check": None, "error": None,
    }
    try:
        fit = fit_extrapolate(h)
    except DegenerateFitError as exc:
        out["error"] = str(exc)
        return out
    out["c_e"], out["c_e_err"] = fit.C_E, fit.C_E_err
    if rates is None:
        out["error"] = "no rate estimates"
        return out
    try:
        c_dist = correct_extrapolation(fit.C_E, rates.mean, h.n_attempt)
        v = visibility(out["c_m"], c_dist, C_E=fit.C_E, N_attempt=h.n_attempt, rates=rates.mean)
    except (InconsistentInputsError, ValueError) as exc:
        out["error"] = str(exc)
        return out
    out["c_dist"], out["c_dist_err"] = c_dist, fit.C_E_err
    out["visibility"] = v.V
    out["visibility_err"] = math.hypot(math.sqrt(max(out["c_m"], 1)) / c_dist,
                                       out["c_m"] * fit.C_E_err / c_dist ** 2)
    expected = h.n_attempt * p_coinc_zero(rates.mean, InterferenceParams(0.0))
    sigma = math.hypot(fit.C_E_err, _propagated_expectation_err(rates.mean, rates.stderr, h.n_attempt))
    z = (c_dist - expected) / sigma if sigma > 0 else (0.0 if c_dist == expected else None)
    out["self_check"] = {"expected_c_dist_eta0": expected, "sigma": sigma, "z": z,
                         "within_4_sigma": z is not None and abs(z) < 4}
    return out


def truth_rates(sidecar: dict, window: DetectionWindow) -> RateEstimate | None:
    """In-window rates implied by the simulator model recorded in a sidecar."""
    from .sequence import EmitterDetectorModel

    run = sidecar.get("config", {})
    model = run.get("model")
    seq = run.get("sequence")
    if model is None:
        return None
    spacing = SequenceConfig.from_dict(seq).pulse_spacing_ns if seq else 200.0
    m = EmitterDetectorModel.from_dict(model)
    mean = m.window_rates(DetectionWindow(window.T_start, window.T_end, m.tau_ns), spacing)
    return RateEstimate(mean, RateEstimates.zero(), "simulator ground truth")


def analyze_pieces(pieces: Iterable[TagStream], cfg: SequenceConfig, windows: list[DetectionWindow],
                   *, workers: int = 1, sidecar: dict | None = None,
                   rate_source: str = "auto") -> tuple[dict, list[np.ndarray]]:
    """Run the whole pipeline; returns the report and per-window records.

    ``rate_source`` is ``"estimate"`` (single-node rounds, error if absent),
    ``"truth"`` (sidecar model) or ``"auto"`` (estimate, else truth).
    """
    total = map_reduce(pieces, cfg, windows, workers)
    dur_s = total.duration_ticks * cfg.tick_ns * 1e-9
    singles = [n / dur_s if dur_s > 0 else 0.0 for n in total.n_detector_events]
    n_att = total.n_blocks * PULSES_PER_BLOCK
    report = {
        "n_blocks": total.n_blocks,
        "n_joint_blocks": total.n_joint_total,
        "n_tags": total.raw_tags,
        "n_between_blocks": total.n_between,
        "singles_rate_hz": singles,
        "burst_filter": {
            "removed_blocks": total.removed,
            "removed_fraction": total.removed / total.n_blocks if total.n_blocks else 0.0,
            "expected_false_removals": expected_false_removals(*singles, n_att),
        },
        "windows": [],
    }
    try:
        sbr = sbr_curve(total.singles)
        report["sbr"] = sbr.to_dict()
    except InsufficientDataError as exc:
        report["sbr"] = {"error": str(exc)}
    for w, part in zip(windows, total.windows):
        rates = None
        if rate_source in ("auto", "estimate"):
            try:
                rates = estimate_rates(part.rates, w)
            except EstimationError:
                if rate_source == "estimate":
                    raise
        if rates is None and rate_source in ("auto", "truth"):
            rates = truth_rates(sidecar or {}, w)
        report["windows"].append(window_report(part, w, rates))
    return report, [p.records for p in total.windows]
