"""Mapping between real update vectors and OFDM symbol blocks.

A length-``d`` vector is zero-padded to ``2*s*N`` entries with
``N = ceil(d / (2s))``.  Block ``n`` (0-based) takes its real parts from
global entries ``2*n*s ... (2n+1)*s - 1`` and its imaginary parts from
``(2n+1)*s ... (2n+2)*s - 1``.  In 1-based terms: the i-th sample of block n
is ``v[2(n-1)s+i] + j*v[(2n-1)s+i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["SymbolBlocks", "pack_update", "unpack_blocks", "blocks_to_vector", "num_blocks"]


def num_blocks(d: int, s: int) -> int:
    return math.ceil(d / (2 * s))


@dataclass(frozen=True)
class SymbolBlocks:
    """``blocks[n, i]`` is the i-th subchannel sample of OFDM symbol ``n``."""

    blocks: np.ndarray  # complex, shape (N, s)
    d_orig: int

    @property
    def N(self) -> int:
        return self.blocks.shape[0]

    @property
    def s(self) -> int:
        return self.blocks.shape[1]

    def energy(self) -> float:
        """Sum over blocks of the squared l2 norm."""
        b = self.blocks
        return float(np.sum(b.real * b.real + b.imag * b.imag))

    def scaled(self, factor: float) -> "SymbolBlocks":
        return SymbolBlocks(self.blocks * factor, self.d_orig)


def pack_update(update, s: int) -> SymbolBlocks:
    if int(s) != s or s <= 0:
        raise ValueError(f"subchannel count s must be a positive integer, got {s}")
    v = np.asarray(update, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValueError(f"update must be a non-empty vector, got shape {v.shape}")
    d = v.shape[0]
    n_blocks = num_blocks(d, s)
    padded = np.zeros(2 * s * n_blocks)
    padded[:d] = v
    halves = padded.reshape(n_blocks, 2, s)
    blocks = np.empty((n_blocks, s), dtype=np.complex128)
    # assign parts directly so the roundtrip is bit-exact
    blocks.real = halves[:, 0, :]
    blocks.imag = halves[:, 1, :]
    return SymbolBlocks(blocks, d)


def blocks_to_vector(samples: np.ndarray, d: int) -> np.ndarray:
    """Flatten complex samples of shape ``(..., N, s)`` into real vectors of length ``d``.

    Leading axes are kept, so batched Monte Carlo arrays unpack in one call.
    """
    samples = np.asarray(samples)
    *lead, n_blocks, s = samples.shape
    if 2 * s * n_blocks < d:
        raise ValueError(f"{n_blocks} blocks of {s} samples cannot hold d={d} entries")
    out = np.empty((*lead, n_blocks, 2, s))
    out[..., 0, :] = samples.real
    out[..., 1, :] = samples.imag
    return out.reshape(*lead, 2 * s * n_blocks)[..., :d]


def unpack_blocks(blocks: SymbolBlocks) -> np.ndarray:
    b = np.asarray(blocks.blocks)
    if b.ndim != 2:
        raise ValueError(f"blocks must have shape (N, s), got {b.shape}")
    n_blocks, s = b.shape
    if n_blocks != num_blocks(blocks.d_orig, s):
        raise ValueError(
            f"{n_blocks} blocks inconsistent with d_orig={blocks.d_orig} and s={s}"
        )
    return blocks_to_vector(b, blocks.d_orig).copy()
