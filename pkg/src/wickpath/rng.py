"""Counter-based Gaussian noise keyed by (seed, stream, step).

Philox4x32-10 is evaluated elementwise over numpy arrays, so any draw can be
produced without generating the ones before it and the result never depends on
how a batch is split across workers.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# Domains keep closed-loop paths and controller rollouts on disjoint counters.
DOMAIN_PATH = 0
DOMAIN_ROLLOUT = 1
_LANE_BITS = 20


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable) and
    ``key`` a pair of uint32 values. Returns four uint64 arrays holding 32-bit
    words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _unit_interval(a, b):
    # 53-bit uniform in [0, 1)
    hi = (a >> np.uint64(5)).astype(np.float64)
    lo = (b >> np.uint64(6)).astype(np.float64)
    return (hi * 67108864.0 + lo) / 9007199254740992.0


def standard_normals(seed: int, streams, n_steps: int, m: int, domain: int = DOMAIN_PATH,
                     step_offset: int = 0) -> np.ndarray:
    """Standard normal draws of shape ``(len(streams), n_steps, m)``.

    Entry ``[i, n, j]`` is a pure function of ``(seed, streams[i], step_offset + n, j,
    domain)``: one Philox block per (stream, step, column pair) feeds a Box-Muller
    transform.
    """
    if n_steps < 0 or m < 1:
        raise ValueError("n_steps must be >= 0 and m >= 1")
    streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    key = (seed & 0xFFFFFFFF, seed >> 32)
    n_pairs = (m + 1) // 2
    step = np.arange(step_offset, step_offset + n_steps, dtype=np.uint64)
    lane = np.arange(n_pairs, dtype=np.uint64) | np.uint64(domain << _LANE_BITS)
    c0 = step[None, :, None]
    c1 = lane[None, None, :]
    c2 = (streams & _MASK32)[:, None, None]
    c3 = (streams >> _SHIFT32)[:, None, None]
    shape = (streams.size, n_steps, n_pairs)
    w0, w1, w2, w3 = (np.broadcast_to(w, shape) for w in philox4x32((c0, c1, c2, c3), key))
    u1 = 1.0 - _unit_interval(w0, w1)  # (0, 1]
    u2 = _unit_interval(w2, w3)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(shape + (2,))
    z[..., 0] = radius * np.cos(angle)
    z[..., 1] = radius * np.sin(angle)
    return z.reshape(streams.size, n_steps, 2 * n_pairs)[:, :, :m]


def rollout_stream(decision_index: int, rollout_index):
    """Stream id for rollout ``rollout_index`` at decision ``decision_index``."""
    return (np.uint64(decision_index) << _SHIFT32) | np.asarray(rollout_index, dtype=np.uint64)
