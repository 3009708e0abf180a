"""Counter-based random numbers.

Every draw is a pure function of ``(seed, stream, step, lane)``: a SplitMix64
finalizer applied to a per-stream key plus a Weyl-sequence counter.  Batches
of trajectories can therefore be advanced in any grouping or order and still
see exactly the same noise, which numpy's sequential generators cannot offer
when the set of active streams shrinks over time.

Each normal variate consumes two 64-bit words (Box-Muller, cosine branch).
A step owns ``LANES`` lanes, so callers index lanes ``0 <= lane < LANES``.
"""

import hashlib

import numpy as np

LANES = 1 << 16

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0xD1B54A32D192ED03)
_TWO_M53 = 2.0 ** -53


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(a):
    return np.atleast_1d(np.asarray(a, dtype=np.int64)).astype(np.uint64)


def stream_key(seed, stream):
    """64-bit key of ``stream`` under ``seed`` (vectorised over ``stream``)."""
    base = _mix(np.array([int(seed) % (1 << 64)], dtype=np.uint64) + _GAMMA)
    return _mix(base ^ _mix(_u64(stream) * _STREAM_SALT + _GAMMA))


def _words(key, step, lane, word):
    counter = (_u64(step) * np.uint64(LANES) + _u64(lane)) * np.uint64(2) + np.uint64(word)
    return _mix(key + (counter + np.uint64(1)) * _GAMMA)


def _to_uniform(w, open_low=False):
    u = (w >> np.uint64(11)).astype(np.float64)
    return (u + 1.0) * _TWO_M53 if open_low else u * _TWO_M53


def uniform_keyed(key, step, lane):
    """Uniform variates on (0, 1] from precomputed stream keys."""
    with np.errstate(over="ignore"):
        w = _words(key, step, lane, 0)
    return _to_uniform(w, open_low=True)


def gaussian_keyed(key, step, lane):
    """Standard normals from precomputed stream keys (Box-Muller, cosine branch)."""
    with np.errstate(over="ignore"):
        w1 = _words(key, step, lane, 0)
        w2 = _words(key, step, lane, 1)
    u1 = _to_uniform(w1, open_low=True)
    u2 = _to_uniform(w2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def uniform(seed, stream, step, lane):
    """Uniform variates on (0, 1], broadcast over ``stream``, ``step``, ``lane``."""
    with np.errstate(over="ignore"):
        key = stream_key(seed, stream)
    return uniform_keyed(key, step, lane)


def gaussian(seed, stream, step, lane):
    """Standard normal variates, broadcast over ``stream``, ``step``, ``lane``."""
    with np.errstate(over="ignore"):
        key = stream_key(seed, stream)
    return gaussian_keyed(key, step, lane)


def step_noise(seed, streams, steps, dim, lane_offset=0):
    """Normals of shape ``(len(steps), len(streams), dim)`` for an ensemble."""
    streams = np.asarray(streams, dtype=np.int64)
    steps = np.asarray(steps, dtype=np.int64)
    lanes = np.arange(lane_offset, lane_offset + dim, dtype=np.int64)
    return gaussian(seed, streams[None, :, None], steps[:, None, None], lanes[None, None, :])


def derive_seed(root, label):
    """Child seed for a named pipeline stage.

    ``sha256("<root>/<label>")`` truncated to 63 bits; stable across
    platforms and Python versions.
    """
    digest = hashlib.sha256(f"{int(root)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF
