"""Synthetic time-tag streams for the heartbeat-synchronised photon sequence.

A *ready cycle* is: charge/resonance checks on both nodes (geometric number
of attempts each), a handshake, then ``heartbeats_per_ready`` heartbeats of
photon generation.  Each generation heartbeat starts with the lock slot, waits
``photon_gen_delay``, then plays ``blocks_per_heartbeat`` blocks of a spin
reset followed by ``pulses_per_block`` excitation pulses.

All timestamps are integer ticks of ``tag_resolution`` picoseconds.  Pulse
tick ``t`` is the moment an infinitely short excitation would reach the
detectors; detection bin ``j`` of a block spans one pulse spacing starting at
pulse ``j``.

Randomness is drawn from counter-based generators keyed by (seed, purpose,
chunk index), where a chunk is a fixed number of ready cycles.  The stream
therefore depends only on (config, model, eta, seed, n_blocks), never on how
many workers generated it.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Iterator

import numpy as np

from .coincidence import RateEstimates
from .temporal import DEFAULT_LIFETIME_NS, DetectionWindow


class ConfigError(ValueError):
    """Invalid or infeasible sequence configuration."""


class Channel(IntEnum):
    DET_A = 0
    DET_B = 1
    HEARTBEAT = 2
    MARKER_NODE1 = 3
    MARKER_NODE2 = 4


class Origin(IntEnum):
    MARKER = 0
    NV_NODE1 = 1
    NV_NODE2 = 2
    BACKGROUND = 3
    LEAK = 4
    BURST = 5
    NV_BUNCHED = 6


class BlockKind(IntEnum):
    JOINT = 0
    NODE1 = 1
    NODE2 = 2


# RNG purposes; part of the key so streams for different purposes never overlap.
_RNG_CR = 1
_RNG_EVENTS = 2
_RNG_BURSTS = 3


def make_rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SequenceConfig:
    heartbeat_period_us: float = 200.0
    lock_slot_us: float = 2.5
    photon_gen_delay_us: float = 45.0
    blocks_per_heartbeat: int = 39
    pulses_per_block: int = 10
    spin_reset_us: float = 1.5
    pulse_spacing_ns: float = 200.0
    heartbeats_per_ready: int = 2
    cr_pass_rate: float = 0.075
    cr_mean_duration_us: float = 1500.0
    comm_delay_us: float = 10.0
    pulse_width_ns: float = 2.0
    tag_resolution_ps: float = 80.0
    dead_time_ns: float = 20.0
    calibration_interval: int = 0
    chunk_cycles: int = 64

    def __post_init__(self):
        self.validate()

    @property
    def tick_ns(self) -> float:
        return self.tag_resolution_ps / 1000.0

    def ticks(self, ns: float) -> int:
        n = ns / self.tick_ns
        r = round(n)
        if abs(n - r) > 1e-6 * max(1.0, abs(n)):
            raise ConfigError(f"{ns} ns is not a whole number of {self.tag_resolution_ps} ps ticks")
        return int(r)

    @property
    def heartbeat_ticks(self) -> int:
        return self.ticks(self.heartbeat_period_us * 1000)

    @property
    def spacing_ticks(self) -> int:
        return self.ticks(self.pulse_spacing_ns)

    @property
    def block_ticks(self) -> int:
        return self.ticks(self.spin_reset_us * 1000) + self.pulses_per_block * self.spacing_ticks

    @property
    def block_span_ticks(self) -> int:
        """Span of the detection bins of one block."""
        return self.pulses_per_block * self.spacing_ticks

    @property
    def blocks_per_cycle(self) -> int:
        return self.heartbeats_per_ready * self.blocks_per_heartbeat

    @property
    def pulses_per_cycle(self) -> int:
        return self.blocks_per_cycle * self.pulses_per_block

    @property
    def cr_attempt_us(self) -> float:
        return self.cr_mean_duration_us * self.cr_pass_rate

    def first_pulse_offsets(self) -> np.ndarray:
        """Tick offset of each block's first pulse from its heartbeat."""
        start = self.ticks((self.lock_slot_us + self.photon_gen_delay_us + self.spin_reset_us) * 1000)
        return start + self.block_ticks * np.arange(self.blocks_per_heartbeat, dtype=np.int64)

    def validate(self):
        durations = {
            "heartbeat_period_us": self.heartbeat_period_us, "lock_slot_us": self.lock_slot_us,
            "spin_reset_us": self.spin_reset_us, "pulse_spacing_ns": self.pulse_spacing_ns,
            "pulse_width_ns": self.pulse_width_ns, "tag_resolution_ps": self.tag_resolution_ps,
            "cr_mean_duration_us": self.cr_mean_duration_us,
        }
        for name, value in durations.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name in ("photon_gen_delay_us", "dead_time_ns", "comm_delay_us"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("blocks_per_heartbeat", "pulses_per_block", "heartbeats_per_ready", "chunk_cycles"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0 < self.cr_pass_rate <= 1:
            raise ConfigError("cr_pass_rate must lie in (0, 1]")
        if self.calibration_interval == 1 or self.calibration_interval < 0:
            raise ConfigError("calibration_interval must be 0 (off) or >= 2")
        if self.pulse_width_ns > self.pulse_spacing_ns:
            raise ConfigError("pulse_width_ns exceeds pulse_spacing_ns")
        used = (self.lock_slot_us + self.photon_gen_delay_us
                + self.blocks_per_heartbeat * (self.spin_reset_us
                                               + self.pulses_per_block * self.pulse_spacing_ns / 1000))
        if used > self.heartbeat_period_us + 1e-9:
            raise ConfigError(
                f"heartbeat budget exceeded: lock_slot + photon_gen_delay + blocks_per_heartbeat * "
                f"(spin_reset + pulses_per_block * pulse_spacing) = {used:g} us > "
                f"heartbeat_period {self.heartbeat_period_us:g} us")
        for ns in (self.heartbeat_period_us * 1000, self.lock_slot_us * 1000,
                   self.photon_gen_delay_us * 1000, self.spin_reset_us * 1000, self.pulse_spacing_ns):
            self.ticks(ns)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SequenceConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sequence config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EmitterDetectorModel:
    """Emitters, background and detector artefacts.

    ``detection`` holds per-excitation detection probabilities over the whole
    detection bin (its ``pDC`` fields are unused; background is given as
    rates).  Background rates are per detector.
    """

    detection: RateEstimates = field(default_factory=lambda: RateEstimates(3e-5, 3e-5, 2e-5, 2e-5, 0.0, 0.0))
    tau_ns: float = DEFAULT_LIFETIME_NS
    dark_hz: float = 5.0
    blinding_hz: float = 35.0
    spdc_hz: float = 150.0
    background_hz_override: tuple[float, float] | None = None
    leak_prob: float = 0.0
    burst_rate_hz: float = 0.0
    burst_multiplicity: int = 3
    burst_span_ns: float = 160.0

    def __post_init__(self):
        for name in ("dark_hz", "blinding_hz", "spdc_hz", "burst_rate_hz"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.leak_prob <= 1:
            raise ConfigError("leak_prob must be a probability")
        if self.tau_ns <= 0:
            raise ConfigError("tau_ns must be positive")
        for p in (self.detection.p1A + self.detection.p1B, self.detection.p2A + self.detection.p2B):
            if p > 1:
                raise ConfigError("per-node detection probabilities sum above 1")
        if self.background_hz_override is not None and min(self.background_hz_override) < 0:
            raise ConfigError("background rates must be non-negative")

    @property
    def background_hz(self) -> tuple[float, float]:
        if self.background_hz_override is not None:
            return tuple(float(x) for x in self.background_hz_override)
        total = self.dark_hz + self.blinding_hz + self.spdc_hz
        return (total, total)

    def bin_fraction(self, window: DetectionWindow, spacing_ns: float) -> float:
        """Fraction of bin-truncated emission that falls inside ``window``."""
        tau = self.tau_ns
        return (math.exp(-window.T_start / tau) - math.exp(-window.T_end / tau)) / (
            1 - math.exp(-spacing_ns / tau))

    def window_rates(self, window: DetectionWindow, spacing_ns: float) -> RateEstimates:
        """Ground-truth in-window rates the analysis should recover."""
        f = self.bin_fraction(window, spacing_ns)
        d = self.detection
        bg_a, bg_b = self.background_hz
        w_s = window.W * 1e-9
        return RateEstimates(d.p1A * f, d.p1B * f, d.p2A * f, d.p2B * f, bg_a * w_s, bg_b * w_s)

    @classmethod
    def from_window_rates(cls, rates: RateEstimates, window: DetectionWindow,
                          spacing_ns: float = 200.0, **kwargs) -> EmitterDetectorModel:
        """Model whose in-window probabilities equal ``rates``."""
        tau = kwargs.get("tau_ns", DEFAULT_LIFETIME_NS)
        f = (math.exp(-window.T_start / tau) - math.exp(-window.T_end / tau)) / (
            1 - math.exp(-spacing_ns / tau))
        det = RateEstimates(rates.p1A / f, rates.p1B / f, rates.p2A / f, rates.p2B / f, 0.0, 0.0)
        w_s = window.W * 1e-9
        return cls(detection=det, background_hz_override=(rates.pDCA / w_s, rates.pDCB / w_s), **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detection"] = self.detection.as_dict()
        if self.background_hz_override is not None:
            d["background_hz_override"] = list(self.background_hz_override)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EmitterDetectorModel:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "detection" in d:
            det = d["detection"]
            det = {**{"pDCA": 0.0, "pDCB": 0.0}, **det}
            d["detection"] = RateEstimates(**det)
        if d.get("background_hz_override") is not None:
            d["background_hz_override"] = tuple(d["background_hz_override"])
        return cls(**d)


@dataclass
class TagStream:
    """Time-ordered tags.  ``origin`` and ``pulse_index`` are simulator
    ground truth and are not serialised."""

    timestamps: np.ndarray
    channels: np.ndarray
    multiplicity: np.ndarray | None = None
    origin: np.ndarray | None = None
    pulse_index: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.uint64)
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.multiplicity is None:
            self.multiplicity = np.ones(self.timestamps.shape, dtype=np.uint8)
        else:
            self.multiplicity = np.asarray(self.multiplicity, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @classmethod
    def empty(cls) -> TagStream:
        return cls(np.zeros(0, np.uint64), np.zeros(0, np.uint8), origin=np.zeros(0, np.uint8),
                   pulse_index=np.zeros(0, np.int64))

    def sorted(self) -> TagStream:
        order = np.lexsort((self.channels, self.timestamps))
        return self.take(order)

    def take(self, idx) -> TagStream:
        return TagStream(
            self.timestamps[idx], self.channels[idx], self.multiplicity[idx],
            None if self.origin is None else self.origin[idx],
            None if self.pulse_index is None else self.pulse_index[idx],
            dict(self.meta))

    def channel_times(self, channel: int) -> np.ndarray:
        return self.timestamps[self.channels == channel]

    @staticmethod
    def concat(parts: list[TagStream]) -> TagStream:
        if not parts:
            return TagStream.empty()
        has_truth = all(p.origin is not None for p in parts)
        meta = dict(parts[0].meta)
        bursts = [b for p in parts for b in p.meta.get("bursts", [])]
        if bursts:
            meta["bursts"] = bursts
        return TagStream(
            np.concatenate([p.timestamps for p in parts]),
            np.concatenate([p.channels for p in parts]),
            np.concatenate([p.multiplicity for p in parts]),
            np.concatenate([p.origin for p in parts]) if has_truth else None,
            np.concatenate([p.pulse_index for p in parts]) if has_truth else None,
            meta)


@dataclass
class Schedule:
    pulse_ticks: np.ndarray
    pulse_block: np.ndarray
    block_marker_ticks: np.ndarray
    block_cycle: np.ndarray
    heartbeat_ticks: np.ndarray


def _cycle_block_ticks(cfg: SequenceConfig, start_heartbeats: np.ndarray) -> np.ndarray:
    """First-pulse ticks of every block, shape (n_cycles, blocks_per_cycle)."""
    hb = np.asarray(start_heartbeats, dtype=np.int64)[:, None] + np.arange(cfg.heartbeats_per_ready)
    starts = hb[:, :, None] * cfg.heartbeat_ticks + cfg.first_pulse_offsets()[None, None, :]
    return starts.reshape(len(start_heartbeats), -1)


def build_schedule(cfg: SequenceConfig, n_ready_cycles: int,
                   start_heartbeats=None) -> Schedule:
    """Excitation and marker times for ``n_ready_cycles`` cycles.

    Without explicit ``start_heartbeats`` the cycles run back to back, i.e.
    with no charge-check wait in between.
    """
    cfg.validate()
    if n_ready_cycles < 0:
        raise ConfigError("n_ready_cycles must be non-negative")
    if start_heartbeats is None:
        start_heartbeats = cfg.heartbeats_per_ready * np.arange(n_ready_cycles, dtype=np.int64)
    start_heartbeats = np.asarray(start_heartbeats, dtype=np.int64)
    blocks = _cycle_block_ticks(cfg, start_heartbeats).reshape(-1)
    pulses = (blocks[:, None] + cfg.spacing_ticks * np.arange(cfg.pulses_per_block)).reshape(-1)
    hbs = (start_heartbeats[:, None] + np.arange(cfg.heartbeats_per_ready)).reshape(-1)
    return Schedule(
        pulse_ticks=pulses,
        pulse_block=np.repeat(np.arange(blocks.size), cfg.pulses_per_block),
        block_marker_ticks=blocks,
        block_cycle=np.repeat(np.arange(n_ready_cycles), cfg.blocks_per_cycle),
        heartbeat_ticks=hbs * cfg.heartbeat_ticks,
    )


@dataclass
class CrWait:
    attempts_node1: np.ndarray
    attempts_node2: np.ndarray
    ready_us: np.ndarray
    wait_heartbeats: np.ndarray

    @property
    def wait_us(self) -> np.ndarray:
        return self.ready_us


def simulate_cr_wait(cfg: SequenceConfig, rng: np.random.Generator, size: int = 1) -> CrWait:
    """Charge/resonance check of both nodes, started on a heartbeat.

    Generation starts on the first heartbeat strictly after the slower node
    is ready plus the communication delay.
    """
    a1 = rng.geometric(cfg.cr_pass_rate, size=size)
    a2 = rng.geometric(cfg.cr_pass_rate, size=size)
    ready = np.maximum(a1, a2) * cfg.cr_attempt_us
    wait = np.floor((ready + cfg.comm_delay_us) / cfg.heartbeat_period_us).astype(np.int64) + 1
    return CrWait(a1, a2, ready, wait)


@dataclass
class _ChunkPlan:
    index: int
    start_heartbeats: np.ndarray  # first generation heartbeat of each cycle
    kinds: np.ndarray  # per cycle: 0 joint, 1 calibration
    n_blocks: np.ndarray  # blocks generated in each cycle
    t_begin: int  # ticks, start of the first cycle's charge check
    t_end: int
    first_block: int  # global block index of the chunk's first block


def _plan_run(cfg: SequenceConfig, n_blocks: int, seed: int) -> list[_ChunkPlan]:
    bpc = cfg.blocks_per_cycle
    n_joint_cycles = -(-n_blocks // bpc) if n_blocks > 0 else 0
    iv = cfg.calibration_interval
    kinds = []
    joint = 0
    c = 0
    while joint < n_joint_cycles:
        is_cal = iv > 0 and (c + 1) % iv == 0
        kinds.append(1 if is_cal else 0)
        joint += 0 if is_cal else 1
        c += 1
    kinds = np.array(kinds, dtype=np.int8)
    blocks = np.full(kinds.size, bpc, dtype=np.int64)
    if n_joint_cycles:
        last_joint = np.flatnonzero(kinds == 0)[-1]
        blocks[last_joint] = n_blocks - (n_joint_cycles - 1) * bpc

    plans = []
    hb_cursor = 0
    block_cursor = 0
    hb_ticks = cfg.heartbeat_ticks
    for ci, lo in enumerate(range(0, kinds.size, cfg.chunk_cycles)):
        hi = min(lo + cfg.chunk_cycles, kinds.size)
        waits = simulate_cr_wait(cfg, make_rng(seed, _RNG_CR, ci), size=hi - lo).wait_heartbeats
        step = waits + cfg.heartbeats_per_ready
        cycle_begin = hb_cursor + np.concatenate([[0], np.cumsum(step)[:-1]])
        starts = cycle_begin + waits
        end_hb = hb_cursor + int(step.sum())
        plans.append(_ChunkPlan(ci, starts, kinds[lo:hi], blocks[lo:hi],
                                hb_cursor * hb_ticks, end_hb * hb_ticks, block_cursor))
        hb_cursor = end_hb
        block_cursor += int(blocks[lo:hi].sum())
    return plans


def _bernoulli_indices(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices in ``range(n)`` each selected independently with prob ``p``."""
    if n == 0 or p <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    parts = []
    pos = -1
    batch = max(16, int(n * p * 1.2 + 10 * math.sqrt(n * p) + 16))
    while True:
        gaps = rng.geometric(p, size=batch)
        idx = pos + np.cumsum(gaps)
        parts.append(idx[idx < n])
        if idx[-1] >= n:
            break
        pos = int(idx[-1])
    return np.concatenate(parts).astype(np.int64)


def _truncated_exp_ns(rng: np.random.Generator, size: int, tau: float, upper: float) -> np.ndarray:
    u = rng.random(size)
    return -tau * np.log1p(-u * (1 - math.exp(-upper / tau)))


def apply_dead_time(ticks: np.ndarray, dead_ticks: int) -> np.ndarray:
    """Mask of events kept by a non-paralysable detector (input sorted)."""
    keep = np.ones(ticks.size, dtype=bool)
    if ticks.size < 2 or dead_ticks <= 0:
        return keep
    close = np.flatnonzero(np.diff(ticks.astype(np.int64)) < dead_ticks)
    if close.size == 0:
        return keep
    last_kept = None
    for i in range(int(close[0]), ticks.size):
        t = int(ticks[i])
        if last_kept is not None and t - last_kept < dead_ticks:
            keep[i] = False
        else:
            last_kept = t
    return keep


def _simulate_chunk(args) -> TagStream:
    cfg, model, eta, seed, plan = args
    rng = make_rng(seed, _RNG_EVENTS, plan.index)
    tick_ns = cfg.tick_ns
    spacing = cfg.spacing_ticks
    ppb = cfg.pulses_per_block

    # blocks
    starts = _cycle_block_ticks(cfg, plan.start_heartbeats)
    take = np.arange(cfg.blocks_per_cycle)[None, :] < plan.n_blocks[:, None]
    block_ticks = starts[take]
    cal = np.repeat(plan.kinds, plan.n_blocks).astype(bool)
    within = np.concatenate([np.arange(n) for n in plan.n_blocks]) if plan.n_blocks.size else np.zeros(0, int)
    kind = np.where(cal, np.where(within % 2 == 0, BlockKind.NODE1, BlockKind.NODE2), BlockKind.JOINT)
    n_blk = block_ticks.size

    times, chans, origin, pidx = [], [], [], []

    def add(t, ch, org, pi):
        times.append(np.asarray(t, dtype=np.int64))
        chans.append(np.full(len(times[-1]), ch, dtype=np.uint8))
        origin.append(np.full(len(times[-1]), org, dtype=np.uint8))
        pidx.append(np.asarray(pi, dtype=np.int64) if pi is not None else np.full(len(times[-1]), -1, np.int64))

    # heartbeat markers over the whole chunk span
    hb = np.arange(plan.t_begin // cfg.heartbeat_ticks, plan.t_end // cfg.heartbeat_ticks, dtype=np.int64)
    add(hb * cfg.heartbeat_ticks, Channel.HEARTBEAT, Origin.MARKER, None)
    add(block_ticks[kind != BlockKind.NODE2], Channel.MARKER_NODE1, Origin.MARKER, None)
    add(block_ticks[kind != BlockKind.NODE1], Channel.MARKER_NODE2, Origin.MARKER, None)

    pulse_ticks = (block_ticks[:, None] + spacing * np.arange(ppb)).reshape(-1)
    pulse_global = plan.first_block * ppb + np.arange(n_blk * ppb, dtype=np.int64)
    active = {
        1: np.repeat(kind != BlockKind.NODE2, ppb),
        2: np.repeat(kind != BlockKind.NODE1, ppb),
    }
    det = model.detection
    p_det = {1: (det.p1A, det.p1B), 2: (det.p2A, det.p2B)}
    upper_ns = cfg.pulse_spacing_ns

    # emitter photons: per node, which pulses yield a detection and where
    hits = {}
    for node in (1, 2):
        pa, pb = p_det[node]
        cand = np.flatnonzero(active[node])
        sel = cand[_bernoulli_indices(rng, cand.size, pa + pb)]
        to_a = rng.random(sel.size) < (pa / (pa + pb) if pa + pb > 0 else 0.0)
        delay = np.floor(_truncated_exp_ns(rng, sel.size, model.tau_ns, upper_ns) / tick_ns).astype(np.int64)
        hits[node] = (sel, to_a, delay)

    # two-photon interference: cross-detector pairs from the same pulse bunch with prob eta
    s1, a1, d1 = hits[1]
    s2, a2, d2 = hits[2]
    common, i1, i2 = np.intersect1d(s1, s2, assume_unique=True, return_indices=True)
    cross = a1[i1] != a2[i2]
    bunch = np.zeros(common.size, dtype=bool)
    if common.size:
        bunch[cross] = rng.random(int(cross.sum())) < eta
    drop1 = np.zeros(s1.size, dtype=bool)
    drop2 = np.zeros(s2.size, dtype=bool)
    drop1[i1[bunch]] = True
    drop2[i2[bunch]] = True
    if bunch.any():
        bp = common[bunch]
        port_a = rng.random(bp.size) < 0.5
        bt = np.minimum(d1[i1[bunch]], d2[i2[bunch]])
        for ch, m in ((Channel.DET_A, port_a), (Channel.DET_B, ~port_a)):
            add(pulse_ticks[bp[m]] + bt[m], ch, Origin.NV_BUNCHED, pulse_global[bp[m]])
    for node, (sel, to_a, delay), drop in ((1, hits[1], drop1), (2, hits[2], drop2)):
        org = Origin.NV_NODE1 if node == 1 else Origin.NV_NODE2
        keep = ~drop
        for ch, m in ((Channel.DET_A, to_a & keep), (Channel.DET_B, ~to_a & keep)):
            add(pulse_ticks[sel[m]] + delay[m], ch, org, pulse_global[sel[m]])

    # leaked excitation light, per active node pulse and detector
    if model.leak_prob > 0:
        width = cfg.pulse_width_ns
        for node in (1, 2):
            cand = np.flatnonzero(active[node])
            for ch in (Channel.DET_A, Channel.DET_B):
                sel = cand[_bernoulli_indices(rng, cand.size, model.leak_prob)]
                off = np.floor(rng.random(sel.size) * width / tick_ns).astype(np.int64)
                add(pulse_ticks[sel] + off, ch, Origin.LEAK, pulse_global[sel])

    # uniform background over the chunk span
    span = plan.t_end - plan.t_begin
    for ch, rate in zip((Channel.DET_A, Channel.DET_B), model.background_hz):
        n = rng.poisson(rate * span * tick_ns * 1e-9)
        add(plan.t_begin + rng.integers(0, span, size=n), ch, Origin.BACKGROUND, None)

    t = np.concatenate(times)
    stream = TagStream(t.astype(np.uint64), np.concatenate(chans),
                       origin=np.concatenate(origin), pulse_index=np.concatenate(pidx)).sorted()

    dead = cfg.ticks(cfg.dead_time_ns) if cfg.dead_time_ns > 0 else 0
    keep = np.ones(len(stream), dtype=bool)
    for ch in (Channel.DET_A, Channel.DET_B):
        idx = np.flatnonzero(stream.channels == ch)
        keep[idx] = apply_dead_time(stream.timestamps[idx], dead)
    stream = stream.take(keep)

    if model.burst_rate_hz > 0:
        spans = np.stack([block_ticks, block_ticks + cfg.block_span_ticks], axis=1)
        stream = inject_bursts(stream, rate_hz=model.burst_rate_hz, multiplicity=model.burst_multiplicity,
                               span_ns=model.burst_span_ns, seed=seed, key=plan.index,
                               tick_ns=tick_ns, t_range=(plan.t_begin, plan.t_end), intervals=spans)
    stream.meta["chunk"] = plan.index
    return stream


def iter_run(cfg: SequenceConfig, model: EmitterDetectorModel, eta: float, seed: int,
             n_blocks: int, workers: int = 1) -> Iterator[TagStream]:
    """Yield the run chunk by chunk in time order."""
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    plans = _plan_run(cfg, n_blocks, seed)
    tasks = ((cfg, model, eta, seed, p) for p in plans)
    if workers <= 1:
        yield from map(_simulate_chunk, tasks)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_simulate_chunk, tasks, chunksize=4)


def simulate_run(cfg: SequenceConfig, model: EmitterDetectorModel, eta: float, seed: int,
                 n_blocks: int, workers: int = 1) -> TagStream:
    stream = TagStream.concat(list(iter_run(cfg, model, eta, seed, n_blocks, workers)))
    stream.meta.pop("chunk", None)
    return stream


def inject_bursts(stream: TagStream, *, rate_hz: float | None = None, count: int | None = None,
                  multiplicity: int = 3, span_ns: float = 160.0, seed: int = 0, key: int = 0,
                  tick_ns: float = 0.08, t_range: tuple[int, int] | None = None,
                  intervals=None) -> TagStream:
    """Add multi-count bursts on both detectors.

    Bursts start at uniformly random times (a Poisson process of ``rate_hz``
    or exactly ``count`` of them) over ``t_range`` or, if given, over the
    union of ``intervals`` shortened so each burst fits inside one interval.
    Dead time is deliberately not applied to burst events.
    """
    if multiplicity <= 2:
        raise ValueError("burst multiplicity must exceed 2")
    if span_ns > 160.0:
        raise ValueError("burst span must not exceed 160 ns")
    span = max(1, int(round(span_ns / tick_ns)))
    rng = make_rng(seed, _RNG_BURSTS, key)
    if intervals is not None:
        iv = np.asarray(intervals, dtype=np.int64).reshape(-1, 2)
        lengths = np.maximum(iv[:, 1] - iv[:, 0] - span, 0)
    else:
        if t_range is None:
            if len(stream) == 0:
                return stream
            t_range = (int(stream.timestamps[0]), int(stream.timestamps[-1]) + 1)
        iv = np.array([[t_range[0], t_range[1]]], dtype=np.int64)
        lengths = np.maximum(iv[:, 1] - iv[:, 0] - span, 0)
    total = int(lengths.sum())
    if count is None:
        count = 0 if not rate_hz or total == 0 else int(rng.poisson(rate_hz * total * tick_ns * 1e-9))
    if count == 0 or total == 0:
        return stream
    pos = np.sort(rng.integers(0, total, size=count))
    cum = np.concatenate([[0], np.cumsum(lengths)])
    which = np.searchsorted(cum, pos, side="right") - 1
    t0 = iv[which, 0] + (pos - cum[which])
    ts, cs = [], []
    for ch in (Channel.DET_A, Channel.DET_B):
        offs = np.sort(rng.integers(0, span, size=(count, multiplicity)), axis=1)
        ts.append((t0[:, None] + offs).reshape(-1))
        cs.append(np.full(count * multiplicity, ch, dtype=np.uint8))
    t = np.concatenate(ts)
    n = t.size
    extra = TagStream(t.astype(np.uint64), np.concatenate(cs),
                      origin=np.full(n, Origin.BURST, np.uint8) if stream.origin is not None else None,
                      pulse_index=np.full(n, -1, np.int64) if stream.pulse_index is not None else None)
    merged = TagStream.concat([stream, extra]).sorted()
    merged.meta = dict(stream.meta)
    merged.meta["bursts"] = list(stream.meta.get("bursts", [])) + [[int(a), int(a + span)] for a in t0]
    return merged


def block_intervals(stream: TagStream, cfg: SequenceConfig) -> np.ndarray:
    """[start, end) ticks of every block's detection bins, from its markers."""
    m = np.union1d(stream.channel_times(Channel.MARKER_NODE1), stream.channel_times(Channel.MARKER_NODE2))
    m = m.astype(np.int64)
    return np.stack([m, m + cfg.block_span_ticks], axis=1)


def with_overrides(cfg: SequenceConfig, **kw) -> SequenceConfig:
    return replace(cfg, **kw)
