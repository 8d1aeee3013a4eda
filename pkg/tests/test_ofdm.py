import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfpn.ofdm import (Numerology, OfdmSymbol, complex_normal, dft, ici_power, idft, pn_freq_coeffs,
                       received_time_domain, received_with_ici)
from cfpn.pn_models import device_table, synthesize_batch

phases = arrays(np.float64, st.integers(1, 64), elements=st.floats(-50, 50))


class TestNumerology:
    def test_default_instance(self):
        num = Numerology()
        assert (num.delta_f, num.b_c, num.t_c, num.t_ofdm) == (15e3, 180e3, 1e-3, 71.4e-6)
        assert num.n_cb == 12
        assert num.n_ct == 14
        assert num.tau_c == 168
        assert num.tau_p == 12
        assert num.data_symbols == 13

    def test_derived_counts_floor(self):
        num = Numerology(delta_f=30e3, b_c=200e3, t_c=1e-3, t_ofdm=35.7e-6)
        assert num.n_cb == 6 and num.n_ct == 28

    def test_invalid(self):
        with pytest.raises(ValueError):
            Numerology(b_c=10e3)


class TestIdft:
    def test_dc_basis(self):
        n = 12
        np.testing.assert_allclose(idft(np.r_[np.sqrt(n), np.zeros(n - 1)]), np.ones(n), atol=1e-15)

    def test_unit_impulse(self):
        n, k = 12, 3
        x = idft(np.eye(n)[k])
        np.testing.assert_allclose(np.abs(x), 1 / np.sqrt(n), atol=1e-15)
        np.testing.assert_allclose(x, np.exp(2j * np.pi * k * np.arange(n) / n) / np.sqrt(n), atol=1e-15)

    def test_parseval(self, rng):
        X = complex_normal(64, 1.0, rng)
        assert np.linalg.norm(idft(X)) ** 2 == pytest.approx(np.linalg.norm(X) ** 2, abs=1e-10)

    def test_empty(self):
        with pytest.raises(ValueError):
            idft([])

    def test_symbol_power(self):
        sym = OfdmSymbol.random(200_000, 0.1, np.random.default_rng(0))
        assert np.mean(np.abs(sym.freq_symbols) ** 2) == pytest.approx(0.1, rel=0.02)


class TestPnCoefficients:
    def test_zero_phase(self):
        np.testing.assert_allclose(pn_freq_coeffs(np.zeros(12)), np.eye(12)[0], atol=1e-15)

    def test_constant_phase(self):
        P = pn_freq_coeffs(np.full(12, 0.7))
        assert P[0] == pytest.approx(np.exp(0.7j))
        np.testing.assert_allclose(P[1:], 0, atol=1e-15)

    def test_single_exponential(self):
        n = 12
        P = pn_freq_coeffs(2 * np.pi * np.arange(n) / n)
        np.testing.assert_allclose(P, np.eye(n)[1], atol=1e-14)

    @settings(max_examples=100)
    @given(phases)
    def test_parseval(self, theta):
        assert abs(np.sum(np.abs(pn_freq_coeffs(theta)) ** 2) - 1.0) < 1e-9


class TestReceivedSignal:
    def test_no_phase_noise(self, rng):
        X, H, Z = (complex_normal(12, 1.0, rng) for _ in range(3))
        np.testing.assert_allclose(received_with_ici(X, H, np.eye(12)[0], Z), H * X + Z, atol=1e-15)

    def test_zero_input(self, rng):
        Z = complex_normal(12, 1.0, rng)
        P = pn_freq_coeffs(rng.normal(size=12))
        np.testing.assert_allclose(received_with_ici(np.zeros(12), complex_normal(12, 1.0, rng), P, Z), Z)

    def test_explicit_sum_form(self, rng):
        n = 8
        X, H = complex_normal(n, 1.0, rng), complex_normal(n, 1.0, rng)
        P = pn_freq_coeffs(rng.normal(size=n))
        Y = received_with_ici(X, H, P)
        for i in range(n):
            cpe = P[0] * H[i] * X[i]
            ici = sum(P[(i - l) % n] * H[l] * X[l] for l in range(n) if l != i)
            assert Y[i] == pytest.approx(cpe + ici, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 64))
    def test_matches_time_domain(self, seed, n):
        rng = np.random.default_rng(seed)
        X = complex_normal(n, 1.0, rng)
        theta = rng.normal(0, 1.0, n)
        Y = received_with_ici(X, np.ones(n), pn_freq_coeffs(theta))
        np.testing.assert_allclose(Y, received_time_domain(X, np.r_[1.0, np.zeros(n - 1)], theta), atol=1e-9)

    def test_frequency_selective_time_domain(self, rng):
        n = 16
        X = complex_normal(n, 1.0, rng)
        h_time = complex_normal(4, 0.25, rng)
        H = np.fft.fft(np.r_[h_time, np.zeros(n - 4)])
        theta = rng.normal(0, 0.3, n)
        z = complex_normal(n, 0.01, rng)
        Y = received_with_ici(X, H, pn_freq_coeffs(theta), dft(z))
        np.testing.assert_allclose(Y, received_time_domain(X, h_time, theta, z), atol=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            received_with_ici(np.ones(4), np.ones(3), np.ones(4))


class TestIciPower:
    def test_zero_phase(self):
        assert ici_power(np.zeros(12)) == {"cpe_power": 1.0, "ici_power": 0.0}

    @settings(max_examples=50)
    @given(phases)
    def test_sum_to_one(self, theta):
        out = ici_power(theta)
        assert abs(out["cpe_power"] + out["ici_power"] - 1.0) < 1e-9

    def test_b200_symbol_negligible(self):
        num = Numerology()
        fs = num.sample_rate()
        traces = synthesize_batch(device_table("b200"), fs, 4096, 200, np.random.default_rng(0))
        ici = [ici_power(t[:num.n_cb])["ici_power"] for t in traces]
        assert max(ici) < 0.01
