"""Counter-based Gaussian draws keyed by (seed, path, mode, step).

Every normal variate is a pure function of its key, so ensembles can be
generated in any order, in blocks of paths, or on any number of workers and
still be bit-identical.  The bit source is Philox4x32-10.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)
_CHUNK = 1 << 16

# stream tags; keep distinct so independent uses never share counters
STREAM_OU = 0
STREAM_CONVOLUTION = 1
STREAM_INITIAL = 2
STREAM_BROWNIAN = 3
STREAM_AUDIT = 4


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of four uint32-valued arrays (broadcastable)
    key : sequence of two uint32-valued integers or arrays

    Returns
    -------
    tuple of four uint64 arrays holding 32-bit outputs
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = (np.array(c) for c in np.broadcast_arrays(c0, c1, c2, c3))
    k0 = np.asarray(key[0], dtype=np.uint64) & _MASK
    k1 = np.asarray(key[1], dtype=np.uint64) & _MASK
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = c0 * _M0
        p1 = c2 * _M1
        # new c0 = hi(p1) ^ c1 ^ k0, new c2 = hi(p0) ^ c3 ^ k1
        c1 ^= k0
        c3 ^= k1
        c0 = np.right_shift(p1, _SHIFT)
        c0 ^= c1
        c2 = np.right_shift(p0, _SHIFT)
        c2 ^= c3
        p1 &= _MASK
        p0 &= _MASK
        c1, c3 = p1, p0
    return c0, c1, c2, c3


def _split_seed(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(a, b):
    """Two 32-bit words -> a double in the open interval (0, 1)."""
    hi = (a >> np.uint64(5)).astype(np.float64)
    lo = (b >> np.uint64(6)).astype(np.float64)
    return (hi * 67108864.0 + lo + 0.5) / 9007199254740992.0


def keyed_normals(seed: int, paths, steps: int, modes: int, stream: int = STREAM_OU):
    """Standard normal draws indexed as ``out[m, j, i]``.

    ``paths`` is an array of global path indices; the draw for (path, step,
    mode) never depends on which other paths, steps or modes are requested.
    """
    paths = np.asarray(paths, dtype=np.uint64).reshape(-1)
    nblocks = (steps + 1) // 2
    out = np.empty((paths.size, 2 * nblocks, modes))
    if out.size == 0:
        return out[:, :steps, :]
    blk = np.arange(nblocks, dtype=np.uint64).reshape(1, -1, 1)
    mode = np.arange(modes, dtype=np.uint64).reshape(1, 1, -1)
    k0, k1 = _split_seed(seed)
    # chunk over paths so the round temporaries stay cache-sized
    step = max(1, _CHUNK // max(1, nblocks * modes))
    for lo in range(0, paths.size, step):
        pc = paths[lo : lo + step].reshape(-1, 1, 1)
        tag = (np.uint64(stream) << np.uint64(16)) | (pc >> _SHIFT)
        w0, w1, w2, w3 = philox4x32((blk, mode, pc & _MASK, tag), (k0, k1))
        rad = np.sqrt(-2.0 * np.log(_to_unit(w0, w1)))
        ang = 2.0 * np.pi * _to_unit(w2, w3)
        out[lo : lo + step, 0::2, :] = rad * np.cos(ang)
        out[lo : lo + step, 1::2, :] = rad * np.sin(ang)
    return out[:, :steps, :]
