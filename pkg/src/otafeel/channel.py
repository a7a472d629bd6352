"""Fading MAC: gains, receiver noise, PS-side sum-CSI and propagation.

Array layouts (optional leading batch axes are allowed everywhere so Monte
Carlo trials can be vectorised):

* gains      ``(..., M, K, s, N)``
* noise      ``(..., K, s, N)``
* csi        ``(..., K, s, N)``
* received   ``(..., K, s, N)``
* tx symbols ``(M, s, N)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RngStream, SimConfig, complex_normal
from .packing import SymbolBlocks

__all__ = [
    "ChannelTensor",
    "NoiseTensor",
    "CsiTensor",
    "ReceivedTensor",
    "sample_channel",
    "sample_noise",
    "sample_csi",
    "stack_tx",
    "propagate",
]


@dataclass(frozen=True)
class ChannelTensor:
    gains: np.ndarray
    deterministic: bool = False

    @property
    def M(self) -> int:
        return self.gains.shape[-4]

    @property
    def K(self) -> int:
        return self.gains.shape[-3]

    def sum_over_devices(self) -> np.ndarray:
        return self.gains.sum(axis=-4)


@dataclass(frozen=True)
class NoiseTensor:
    samples: np.ndarray


@dataclass(frozen=True)
class CsiTensor:
    estimates: np.ndarray
    errors: np.ndarray


@dataclass(frozen=True)
class ReceivedTensor:
    samples: np.ndarray


def _shape(cfg: SimConfig, batch) -> tuple[int, ...]:
    return tuple(batch) if np.iterable(batch) else (int(batch),)


def sample_channel(cfg: SimConfig, rng: RngStream, batch=()) -> ChannelTensor:
    shape = (*_shape(cfg, batch), cfg.M, cfg.K, cfg.s, cfg.N)
    if cfg.channel_mode == "deterministic":
        return ChannelTensor(np.full(shape, math.sqrt(cfg.sigma_h2), dtype=np.complex128), True)
    return ChannelTensor(complex_normal(rng.generator(), cfg.sigma_h2, shape))


def sample_noise(cfg: SimConfig, rng: RngStream, batch=()) -> NoiseTensor:
    shape = (*_shape(cfg, batch), cfg.K, cfg.s, cfg.N)
    return NoiseTensor(complex_normal(rng.generator(), cfg.sigma_z2, shape))


def sample_csi(channel: ChannelTensor, cfg: SimConfig, rng: RngStream) -> CsiTensor:
    if channel.gains.shape[-4:] != (cfg.M, cfg.K, cfg.s, cfg.N):
        raise ValueError(
            f"channel shape {channel.gains.shape[-4:]} does not match config "
            f"{(cfg.M, cfg.K, cfg.s, cfg.N)}"
        )
    exact = channel.sum_over_devices()
    errors = complex_normal(rng.generator(), cfg.sigma_ht2, exact.shape)
    if cfg.sigma_ht2 == 0:
        return CsiTensor(exact, errors)
    return CsiTensor(exact + errors, errors)


def stack_tx(tx: Sequence[SymbolBlocks] | np.ndarray) -> np.ndarray:
    """Per-device blocks -> complex array of shape ``(M, s, N)``."""
    if isinstance(tx, np.ndarray):
        if tx.ndim != 3:
            raise ValueError(f"tx array must have shape (M, s, N), got {tx.shape}")
        return tx
    blocks = [np.asarray(b.blocks) for b in tx]
    if not blocks:
        raise ValueError("no transmitted blocks")
    if any(b.shape != blocks[0].shape for b in blocks):
        raise ValueError("devices transmit blocks of different shapes")
    return np.stack([b.T for b in blocks])


def propagate(tx, channel: ChannelTensor, noise: NoiseTensor) -> ReceivedTensor:
    """``y[k,i,n] = sum_m h[m,k,i,n] * x[m,i,n] + z[k,i,n]``."""
    x = stack_tx(tx)
    h = channel.gains
    if h.shape[-4] != x.shape[0] or h.shape[-2:] != x.shape[1:]:
        raise ValueError(f"tx shape {x.shape} inconsistent with channel shape {h.shape}")
    if noise.samples.shape[-3:] != h.shape[-3:]:
        raise ValueError(f"noise shape {noise.samples.shape} inconsistent with channel shape {h.shape}")
    y = np.einsum("...mkin,min->...kin", h, x)
    return ReceivedTensor(y + noise.samples)
