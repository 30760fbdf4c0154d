"""Deterministic, name-keyed pseudo-random streams.

Every tensor gets its own splitmix64 stream so values never depend on the
order in which tensors are created:

    key     = mix64(seed XOR fnv1a64(utf8(name)))
    z_i     = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)      (i = 0, 1, ...)
    u_i     = (z_i >> 11) * 2**-53                            in [0, 1)
    value_i = low + (high - low) * u_i                        (float64, then cast)

with ``mix64`` the splitmix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

All arithmetic is modulo 2**64. Elements are laid out in C (row-major) order.
"""

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, which is exactly what splitmix64 needs
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stream_key(name: str, seed: int) -> int:
    return mix64((seed & _MASK64) ^ fnv1a64(name))


def uniform_u01(name: str, seed: int, size: int) -> np.ndarray:
    """First ``size`` draws in [0, 1) of the stream for ``name``."""
    key = np.uint64(stream_key(name, seed))
    idx = np.arange(1, size + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64_array(key + idx * np.uint64(GOLDEN_GAMMA))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def uniform(name, seed, shape, low, high, dtype=np.float32):
    shape = tuple(int(s) for s in shape)
    u = uniform_u01(name, seed, int(np.prod(shape, dtype=np.int64)))
    return (low + (high - low) * u).reshape(shape).astype(dtype)
