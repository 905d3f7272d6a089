"""Independent reference computations used by the tests.

Nothing here calls into the package's closed forms: the oracles sample or
enumerate the underlying processes directly.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate


def _bernoulli_set(rng, n: int, p: float) -> np.ndarray:
    """Indices in range(n) that fire, each independently with probability p."""
    if p <= 0:
        return np.zeros(0, dtype=np.int64)
    out = []
    pos = -1
    while True:
        idx = pos + np.cumsum(rng.geometric(p, size=int(n * p) + 1000))
        out.append(idx[idx < n])
        if idx[-1] >= n:
            return np.concatenate(out)
        pos = int(idx[-1])


def bernoulli_round_coincidences(rates, eta: float, n_rounds: int, same_bin: bool,
                                 seed: int = 0) -> int:
    """Count rounds with a click on both detectors, sampling each source.

    A round covers one detection bin of detector A and one of detector B;
    for ``same_bin`` the two bins are the same excitation, otherwise two
    independent excitations.  Each emitter photon goes to A, B or nowhere.
    In the same bin, a photon pair heading to different detectors instead
    leaves through one port together with probability ``eta``.  Only rounds
    where something fires are materialised.
    """
    p1A, p1B, p2A, p2B, dA, dB = (float(x) for x in rates)
    rng = np.random.default_rng(seed)
    if not same_bin:
        # bin i feeds detector A, bin j feeds detector B; independent excitations
        a = np.union1d(np.union1d(_bernoulli_set(rng, n_rounds, p1A), _bernoulli_set(rng, n_rounds, p2A)),
                       _bernoulli_set(rng, n_rounds, dA))
        b = np.union1d(np.union1d(_bernoulli_set(rng, n_rounds, p1B), _bernoulli_set(rng, n_rounds, p2B)),
                       _bernoulli_set(rng, n_rounds, dB))
        return int(np.intersect1d(a, b).size)
    e1 = _bernoulli_set(rng, n_rounds, p1A + p1B)
    e2 = _bernoulli_set(rng, n_rounds, p2A + p2B)
    to_a1 = e1[rng.random(e1.size) < p1A / (p1A + p1B)] if e1.size else e1
    to_a2 = e2[rng.random(e2.size) < p2A / (p2A + p2B)] if e2.size else e2
    to_b1 = np.setdiff1d(e1, to_a1)
    to_b2 = np.setdiff1d(e2, to_a2)
    cross = np.union1d(np.intersect1d(to_a1, to_b2), np.intersect1d(to_b1, to_a2))
    bunched = cross[rng.random(cross.size) < eta]
    port_a = rng.random(bunched.size) < 0.5
    a = np.setdiff1d(np.union1d(to_a1, to_a2), bunched)
    b = np.setdiff1d(np.union1d(to_b1, to_b2), bunched)
    a = np.union1d(np.union1d(a, bunched[port_a]), _bernoulli_set(rng, n_rounds, dA))
    b = np.union1d(np.union1d(b, bunched[~port_a]), _bernoulli_set(rng, n_rounds, dB))
    return int(np.intersect1d(a, b).size)


def sample_delta_t(kind: str, t_start: float, t_end: float, tau: float, n: int, seed: int = 0) -> np.ndarray:
    """Arrival-time differences for two independent tags inside a window.

    ``kind`` is ``nvnv``, ``nvdc`` or ``dcdc``: emitter tags follow the
    window-truncated exponential, background tags are uniform.
    """
    rng = np.random.default_rng(seed)

    def emitter(size):
        u = rng.random(size)
        a, b = np.exp(-t_start / tau), np.exp(-t_end / tau)
        return -tau * np.log(a - u * (a - b))

    def uniform(size):
        return t_start + (t_end - t_start) * rng.random(size)

    first = emitter if kind in ("nvnv", "nvdc") else uniform
    second = emitter if kind == "nvnv" else uniform
    dt = first(n) - second(n)
    if kind == "nvdc":
        # either detector may carry the emitter tag
        dt = np.where(rng.random(n) < 0.5, dt, -dt)
    return dt


def quad_integral(f, lo: float, hi: float, points=None) -> float:
    value, _ = integrate.quad(f, lo, hi, points=points, epsabs=1e-13, epsrel=1e-13, limit=400)
    return value


def lorentz_overlap_numeric(f0, gamma, f_nv, gamma_nv) -> float:
    """Overlap from a dense trapezoid on a tan-substituted grid (covers the
    whole real line)."""
    u = np.linspace(-np.pi / 2, np.pi / 2, 400_001)[1:-1]
    scale = max(gamma, gamma_nv)
    f = f_nv + scale * np.tan(u)
    jac = scale / np.cos(u) ** 2
    dens = gamma_nv / np.pi / ((f - f_nv) ** 2 + gamma_nv ** 2)
    filt = 1 / (1 + ((f - f0) / gamma) ** 2)
    return float(np.trapezoid(dens * filt * jac, u))


def brute_force_histogram(block_events):
    """Bin-difference counts by looping over every block and pair.

    ``block_events`` maps a block id to a list of (detector, bin) tuples.
    """
    counts = np.zeros(19, dtype=np.int64)
    for events in block_events.values():
        a_bins = [b for d, b in events if d == 0]
        b_bins = [b for d, b in events if d == 1]
        for i in a_bins:
            for j in b_bins:
                counts[j - i + 9] += 1
    return counts


def poisson_z(observed, expected) -> np.ndarray:
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    return (observed - expected) / np.sqrt(np.maximum(expected, 1.0))
