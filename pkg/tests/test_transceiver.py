import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otafeel.channel import propagate, sample_channel, sample_csi, sample_noise
from otafeel.core import RngStream, SimConfig, StreamLabel
from otafeel.packing import pack_update
from otafeel.transceiver import (
    PowerLedger,
    combine,
    decompose_received,
    estimate_average_update,
    interference_coefficients,
    record_power,
    transmit,
)


def _draw(cfg, seed, batch=()):
    root = RngStream(seed)
    h = sample_channel(cfg, root.child(StreamLabel.CHANNEL, 0), batch)
    z = sample_noise(cfg, root.child(StreamLabel.NOISE, 0), batch)
    c = sample_csi(h, cfg, root.child(StreamLabel.CSI, 0))
    return h, z, c


def test_transmit_scales_and_rejects_non_positive():
    b = pack_update([1.0, 2.0], 1)
    assert np.array_equal(transmit(b, 2.0).blocks, [[2 + 4j]])
    with pytest.raises(ValueError):
        transmit(b, 0.0)


def test_combine_matches_loops():
    cfg = SimConfig(M=3, K=5, d=8, s=2, sigma_ht2=0.5)
    rng = np.random.default_rng(0)
    blocks = [transmit(pack_update(rng.standard_normal(8), 2), 1.3) for _ in range(3)]
    h, z, c = _draw(cfg, 1)
    y = propagate(blocks, h, z)
    out = combine(y, c, cfg.K)
    for i in range(2):
        for n in range(cfg.N):
            ref = sum(np.conj(c.estimates[k, i, n]) * y.samples[k, i, n] for k in range(5)) / 5
            assert out[i, n] == pytest.approx(ref, rel=1e-13)


def test_combine_checks_antenna_count(ref_cfg):
    h, z, c = _draw(ref_cfg, 0)
    y = propagate(np.zeros((2, 1, 1), complex), h, z)
    with pytest.raises(ValueError):
        combine(y, c, 3)


def test_single_device_transparent_channel_recovers_update():
    cfg = SimConfig(M=1, K=1, d=5, s=2, sigma_z2=0.0, channel_mode="deterministic")
    v = np.array([0.5, -1.0, 2.0, 3.0, -4.0])
    h, z, c = _draw(cfg, 0)
    b = transmit(pack_update(v, 2), 1.7)
    est = estimate_average_update(combine(propagate([b], h, z), c, 1), 1.7, 1, 1.0, 5)
    assert np.allclose(est, v, rtol=1e-15, atol=0)


def test_estimate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        estimate_average_update(np.zeros((1, 1)), 0.0, 1, 1.0, 2)
    with pytest.raises(ValueError):
        estimate_average_update(np.zeros((1, 1)), 1.0, 1, 0.0, 2)


@settings(max_examples=30, deadline=None)
@given(
    M=st.integers(1, 4), K=st.integers(1, 6), d=st.integers(1, 12), s=st.integers(1, 4),
    sht=st.sampled_from([0.0, 0.7]), seed=st.integers(0, 1000), alpha=st.floats(0.1, 3.0),
)
def test_terms_sum_to_combined_estimate(M, K, d, s, sht, seed, alpha):
    if s > d:
        s = d
    cfg = SimConfig(M=M, K=K, d=d, s=s, sigma_h2=1.5, sigma_z2=0.8, sigma_ht2=sht)
    rng = np.random.default_rng(seed)
    updates = rng.standard_normal((M, d))
    blocks = [pack_update(u, s) for u in updates]
    h, z, c = _draw(cfg, seed, batch=3)
    direct = combine(propagate([transmit(b, alpha) for b in blocks], h, z), c, K)
    dec = decompose_received(blocks, h, c, z, alpha, M, 1.5)
    assert np.allclose(dec.total(), direct, rtol=1e-10, atol=1e-10)
    est = estimate_average_update(direct, alpha, M, 1.5, d)
    assert np.allclose(dec.total_estimate(), est, rtol=1e-10, atol=1e-10)


def test_decomposition_against_explicit_double_sum():
    cfg = SimConfig(M=3, K=4, d=2, s=1, sigma_ht2=0.5)
    updates = np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]])
    blocks = [pack_update(u, 1) for u in updates]
    h, z, c = _draw(cfg, 5)
    alpha = 1.2
    dec = decompose_received(blocks, h, c, z, alpha, 3, 1.0)
    x = np.stack([b.blocks[:, 0] for b in blocks])  # (M, N)
    g = h.gains[:, :, 0, :]  # (M, K, N)
    cross = np.zeros(1, complex)
    for k in range(4):
        for m in range(3):
            for mp in range(3):
                if m != mp:
                    cross += alpha * np.conj(g[m, k]) * g[mp, k] * x[mp] / 4
    assert np.allclose(dec.terms[1][0], cross, rtol=1e-12)
    sig = sum(alpha * np.mean(np.abs(g[m]) ** 2, axis=0) * x[m] for m in range(3))
    assert np.allclose(dec.terms[0][0], sig, rtol=1e-12)


def test_perfect_csi_terms_vanish(ref_cfg, ref_updates):
    cfg = ref_cfg.with_updates(sigma_ht2=0.0)
    h, z, c = _draw(cfg, 0, batch=10)
    dec = decompose_received([pack_update(u, 1) for u in ref_updates], h, c, z, 1.0, 2, 1.0)
    assert np.all(dec.terms[3] == 0) and np.all(dec.terms[4] == 0)


def test_interference_coefficients_against_loops():
    cfg = SimConfig(M=3, K=4, d=2, s=1, sigma_ht2=1.0)
    h, z, c = _draw(cfg, 2)
    itf, citf = interference_coefficients(h, c)
    g = h.gains[:, :, 0, 0]
    e = c.errors[:, 0, 0]
    for m in range(3):
        ref = sum(g[m, k] * sum(np.conj(g[mp, k]) for mp in range(3) if mp != m) for k in range(4)) / 4
        assert itf[m, 0, 0] == pytest.approx(ref, rel=1e-13)
        assert citf[m, 0, 0] == pytest.approx(sum(np.conj(e[k]) * g[m, k] for k in range(4)) / 4, rel=1e-13)


def test_power_ledger_accumulates():
    led = PowerLedger.empty(2, 1)
    b = pack_update([3.0, 4.0], 1)
    led = record_power(led, 0, 2.0, b)
    led = record_power(led, 0, 1.0, b)
    assert led.energy == (4 * 25 + 25, 0.0)
    assert led.average_power(0) == pytest.approx(62.5)
    assert led.average_power(1) == 0.0
    assert led.violations(50.0) == [0]
    merged = led.merge(led)
    assert merged.rounds == (4, 0)
    with pytest.raises(ValueError):
        record_power(led, 0, 1.0, pack_update([1.0, 2.0, 3.0], 1))
