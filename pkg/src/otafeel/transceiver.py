"""Device transmit scaling, power accounting, PS combining and estimation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelTensor, CsiTensor, NoiseTensor, ReceivedTensor, stack_tx
from .packing import SymbolBlocks, blocks_to_vector

__all__ = [
    "transmit",
    "PowerLedger",
    "record_power",
    "combine",
    "estimate_average_update",
    "TermDecomposition",
    "decompose_received",
    "interference_coefficients",
]


def transmit(update_blocks: SymbolBlocks, alpha_t: float) -> SymbolBlocks:
    if not alpha_t > 0:
        raise ValueError(f"alpha_t must be positive, got {alpha_t}")
    return update_blocks.scaled(alpha_t)


@dataclass(frozen=True)
class PowerLedger:
    """Running left-hand side of the per-device average power constraint.

    ``energy[m]`` accumulates ``alpha_t**2 * sum_n ||update_m^n||^2`` and
    ``rounds[m]`` the number of rounds recorded for device ``m``.
    """

    N: int
    energy: tuple[float, ...]
    rounds: tuple[int, ...]

    @classmethod
    def empty(cls, M: int, N: int) -> "PowerLedger":
        return cls(N, (0.0,) * M, (0,) * M)

    def average_power(self, device: int | None = None):
        energy = np.asarray(self.energy)
        rounds = np.asarray(self.rounds)
        with np.errstate(invalid="ignore", divide="ignore"):
            avg = np.where(rounds > 0, energy / (self.N * np.maximum(rounds, 1)), 0.0)
        return float(avg[device]) if device is not None else avg

    def violations(self, p_bar: float) -> list[int]:
        """Devices whose average power exceeds ``p_bar``.  Reported, never clipped."""
        return [m for m, p in enumerate(self.average_power()) if p > p_bar]

    def merge(self, other: "PowerLedger") -> "PowerLedger":
        if other.N != self.N or len(other.energy) != len(self.energy):
            raise ValueError("cannot merge ledgers of different shape")
        return PowerLedger(
            self.N,
            tuple(a + b for a, b in zip(self.energy, other.energy)),
            tuple(a + b for a, b in zip(self.rounds, other.rounds)),
        )


def record_power(
    ledger: PowerLedger, device: int, alpha_t: float, update_blocks: SymbolBlocks
) -> PowerLedger:
    if update_blocks.N != ledger.N:
        raise ValueError(f"blocks have N={update_blocks.N}, ledger expects N={ledger.N}")
    energy = list(ledger.energy)
    rounds = list(ledger.rounds)
    energy[device] += alpha_t**2 * update_blocks.energy()
    rounds[device] += 1
    return PowerLedger(ledger.N, tuple(energy), tuple(rounds))


def combine(received: ReceivedTensor, csi: CsiTensor, K: int) -> np.ndarray:
    """``out[i,n] = (1/K) sum_k conj(csi[k,i,n]) * y[k,i,n]``; leading batch axes kept."""
    y = received.samples
    est = csi.estimates
    if y.shape[-3:] != est.shape[-3:]:
        raise ValueError(f"received shape {y.shape} does not match CSI shape {est.shape}")
    if y.shape[-3] != K:
        raise ValueError(f"received tensor has {y.shape[-3]} antennas, expected K={K}")
    return np.einsum("...kin,...kin->...in", est.conj(), y) / K


def estimate_average_update(
    combined: np.ndarray, alpha_t: float, M: int, sigma_h2: float, d: int
) -> np.ndarray:
    """Scale the combined samples back to an estimate of the mean update.

    ``combined`` has shape ``(..., s, N)``; the result has shape ``(..., d)``.
    """
    if not alpha_t > 0 or M < 1 or not sigma_h2 > 0:
        raise ValueError("need alpha_t > 0, M >= 1 and sigma_h2 > 0")
    scaled = np.asarray(combined) / (alpha_t * M * sigma_h2)
    return blocks_to_vector(np.swapaxes(scaled, -1, -2), d)


@dataclass(frozen=True)
class TermDecomposition:
    """Combined output split into signal, inter-device interference,
    channel noise, CSI-error interference and CSI-error noise.

    ``terms[l]`` has shape ``(..., s, N)``; ``estimates[l]`` has shape ``(..., d)``.
    """

    terms: np.ndarray
    estimates: np.ndarray

    def total(self) -> np.ndarray:
        return self.terms.sum(axis=0)

    def total_estimate(self) -> np.ndarray:
        return self.estimates.sum(axis=0)


def decompose_received(
    tx_updates: Sequence[SymbolBlocks] | np.ndarray,
    channel: ChannelTensor,
    csi: CsiTensor,
    noise: NoiseTensor,
    alpha_t: float,
    M: int,
    sigma_h2: float,
    d: int | None = None,
) -> TermDecomposition:
    """Five-term split of the combiner output, applied per OFDM symbol.

    ``tx_updates`` are the unscaled update blocks; ``alpha_t`` is applied here.
    """
    if d is None:
        if isinstance(tx_updates, np.ndarray):
            raise ValueError("d is required when tx_updates is an array")
        d = tx_updates[0].d_orig
    x = stack_tx(tx_updates)  # (M, s, N)
    h = channel.gains  # (..., M, K, s, N)
    if h.shape[-4] != M or x.shape[0] != M or h.shape[-2:] != x.shape[1:]:
        raise ValueError(f"tx shape {x.shape} inconsistent with channel shape {h.shape}")
    if csi.errors.shape != noise.samples.shape or csi.errors.shape[-3:] != h.shape[-3:]:
        raise ValueError("CSI, noise and channel shapes are inconsistent")
    K = h.shape[-3]
    z = noise.samples
    err = csi.errors

    hx = h * x[:, None]  # (..., M, K, s, N)
    power = (h.real**2 + h.imag**2).mean(axis=-3)  # (..., M, s, N)
    signal = alpha_t * np.einsum("...min,min->...in", power, x)
    h_sum = h.sum(axis=-4)  # (..., K, s, N)
    hx_sum = hx.sum(axis=-4)
    # sum over m != m' of conj(h_m) h_m' x_m' == conj(sum h) * sum(h x) - sum |h_m|^2 x_m
    cross = (np.einsum("...kin,...kin->...in", h_sum.conj(), hx_sum) / K) * alpha_t - signal
    ch_noise = np.einsum("...kin,...kin->...in", h_sum.conj(), z) / K
    csi_itf = alpha_t * np.einsum("...kin,...kin->...in", err.conj(), hx_sum) / K
    csi_noise = np.einsum("...kin,...kin->...in", err.conj(), z) / K

    terms = np.stack([signal, cross, ch_noise, csi_itf, csi_noise])
    estimates = estimate_average_update(terms, alpha_t, M, sigma_h2, d)
    return TermDecomposition(terms, estimates)


def interference_coefficients(channel: ChannelTensor, csi: CsiTensor | None = None):
    """Per-device interference and CSI-error coefficients.

    Returns ``(itf, csi_itf)``, both of shape ``(..., M, s, N)``:
    ``itf[m] = (1/K) sum_k h_m,k * sum_{m' != m} conj(h_m',k)`` and
    ``csi_itf[m] = (1/K) sum_k conj(err_k) * h_m,k`` (``None`` without CSI).
    """
    h = channel.gains
    K = h.shape[-3]
    others = h.sum(axis=-4, keepdims=True) - h
    itf = (h * others.conj()).mean(axis=-3)
    csi_itf = None
    if csi is not None:
        csi_itf = (csi.errors.conj()[..., None, :, :, :] * h).sum(axis=-3) / K
    return itf, csi_itf
