import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfpn.cf_system import (ChannelRealization, CombinerKind, NetworkConfig, NetworkRealization, apply_pn,
                            combiner, drop_network, ensemble_sinr, form_clusters, link_phases,
                            pathloss_db, sample_channels, se_per_symbol, sinr_per_symbol)


def _net(beta, L=1, serving=None):
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    R = (beta[:, :, None, None] * np.eye(L)).astype(complex)
    if serving is None:
        serving = np.ones((M, K), dtype=bool)
    return NetworkRealization(np.zeros((M, 2)), np.zeros((K, 2)), beta, R, serving)


class TestNetworkConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.M, cfg.L, cfg.K, cfg.area, cfg.p, cfg.noise_psd) == (100, 4, 40, 400.0, 0.1, -174.0)
        assert (cfg.pathloss.lambda0, cfg.pathloss.eta, cfg.pathloss.d0, cfg.pathloss.sigma_sf) == \
            (-35.3, 3.76, 1.0, 10.0)
        assert cfg.W == 400

    def test_noise_power(self):
        # -174 dBm/Hz over 180 kHz = -121.447 dBm
        assert 10 * math.log10(NetworkConfig().noise_var) + 30 == pytest.approx(-121.447, abs=1e-3)

    def test_dict_round_trip(self):
        cfg = NetworkConfig(M=7, cluster_threshold_db=15.0)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid(self):
        with pytest.raises(ValueError):
            NetworkConfig(K=0)


class TestPathloss:
    def test_reference_distance(self):
        assert pathloss_db(1.0, NetworkConfig()) == pytest.approx(-35.3)

    def test_hundred_metres(self):
        assert pathloss_db(100.0, NetworkConfig()) == pytest.approx(-110.5)

    def test_clamped_below_reference(self):
        assert pathloss_db(0.2, NetworkConfig()) == pytest.approx(-35.3)

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            pathloss_db(0.0, NetworkConfig())

    def test_shadowing_spread(self):
        cfg = NetworkConfig(M=1000, K=100, L=1, area=1e-3)
        net = drop_network(cfg, np.random.default_rng(0))
        shadow = 10 * np.log10(net.beta) - (-35.3)
        assert np.std(shadow) == pytest.approx(10.0, rel=0.02)


class TestClusters:
    def test_all_serve(self):
        beta = np.random.default_rng(0).uniform(1e-12, 1e-9, (6, 4))
        assert form_clusters(beta, top_n=6).all()

    def test_strongest_only(self):
        beta = np.random.default_rng(1).uniform(1e-12, 1e-9, (6, 4))
        serving = form_clusters(beta, top_n=1)
        assert serving.sum(axis=0).tolist() == [1, 1, 1, 1]
        assert np.array_equal(np.argmax(serving, axis=0), np.argmax(beta, axis=0))

    def test_threshold_hand_example(self):
        beta_db = np.array([[-60.0, -100.0],
                            [-75.0, -90.0],
                            [-85.0, -109.9]])
        # UE 0: strongest -60, keep >= -80 -> APs 0, 1; UE 1: strongest -90, keep >= -110 -> all
        expected = np.array([[True, True], [True, True], [False, True]])
        np.testing.assert_array_equal(form_clusters(10 ** (beta_db / 10), threshold_db=20.0), expected)

    @settings(max_examples=30)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 10), st.integers(0, 2 ** 31))
    def test_top_n_counts(self, M, K, n, seed):
        beta = np.random.default_rng(seed).uniform(1e-12, 1e-9, (M, K))
        serving = form_clusters(beta, top_n=n)
        assert np.all(serving.sum(axis=0) == min(n, M))


class TestDropNetwork:
    def test_single_link(self):
        net = drop_network(NetworkConfig(M=1, K=1, L=3), np.random.default_rng(0))
        np.testing.assert_array_equal(net.D(0, 0), np.eye(3))

    def test_sanity_and_invariants(self):
        cfg = NetworkConfig(M=25, L=2, K=8, area=200.0)
        net = drop_network(cfg, np.random.default_rng(3))
        assert np.all(net.beta > 0) and np.all(net.beta < 10)
        np.testing.assert_allclose(np.trace(net.R, axis1=-2, axis2=-1).real / cfg.L, net.beta)
        assert np.all(net.serving.sum(axis=0) >= 1)
        assert np.all(net.serving.sum(axis=0) == cfg.cluster_top_n)

    def test_deterministic(self):
        cfg = NetworkConfig(M=10, K=4, L=2)
        a = drop_network(cfg, np.random.default_rng(9))
        b = drop_network(cfg, np.random.default_rng(9))
        assert a.beta.tobytes() == b.beta.tobytes() and np.array_equal(a.serving, b.serving)

    def test_local_scattering_trace(self):
        cfg = NetworkConfig(M=4, K=3, L=4, correlation="local_scattering")
        net = drop_network(cfg, np.random.default_rng(2))
        np.testing.assert_allclose(np.trace(net.R, axis1=-2, axis2=-1).real / cfg.L, net.beta)
        assert np.all(np.linalg.eigvalsh(net.R) > -1e-12 * net.beta[..., None])


class TestChannels:
    def test_per_antenna_variance(self):
        net = _net([[2e-9, 5e-10]], L=2)
        h = sample_channels(net, np.random.default_rng(0), size=100_000)
        var = np.mean(np.abs(h) ** 2, axis=0)  # (K, M, L)
        np.testing.assert_allclose(var[0, 0], 2e-9, rtol=0.02)
        np.testing.assert_allclose(var[1, 0], 5e-10, rtol=0.02)

    def test_zero_correlation(self, rng):
        net = _net([[0.0]], L=3)
        assert np.all(sample_channels(net, rng, size=5) == 0)

    def test_correlated_covariance(self):
        cfg = NetworkConfig(M=1, K=1, L=4, correlation="local_scattering", angular_spread_deg=20)
        net = drop_network(cfg, np.random.default_rng(5))
        h = sample_channels(net, np.random.default_rng(6), size=10_000)[:, 0, 0, :]
        emp = h.T @ h.conj() / h.shape[0]
        R = net.R[0, 0]
        assert np.max(np.abs(emp - R)) < 0.05 * np.linalg.norm(R)

    def test_non_psd_rejected(self, rng):
        net = _net([[1.0]], L=2)
        bad = NetworkRealization(net.ap_positions, net.ue_positions, net.beta,
                                 np.array([[[[1.0, 2.0], [2.0, 1.0]]]], dtype=complex), net.serving)
        with pytest.raises(ValueError, match="positive semi-definite"):
            sample_channels(bad, rng)


class TestApplyPn:
    def test_symbol_zero_identity(self, rng):
        h = rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2))
        np.testing.assert_array_equal(apply_pn(h, np.zeros(3)), h)

    def test_common_rotation(self, rng):
        h = rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2))
        np.testing.assert_allclose(apply_pn(h, np.full(3, 0.4)), np.exp(0.4j) * h)

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_norm_preserved(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(7, 3)) + 1j * rng.normal(size=(7, 3))
        out = apply_pn(h, rng.normal(0, 10, 7))
        assert abs(np.linalg.norm(out) - np.linalg.norm(h)) < 1e-12 * np.linalg.norm(h)

    def test_link_phases_reference(self, rng):
        theta = link_phases(rng.normal(size=(5, 3, 14)), rng.normal(size=(5, 4, 14)))
        assert theta.shape == (5, 4, 3, 14)
        assert np.all(theta[..., 0] == 0.0)


class TestCombiner:
    def test_mr_single_user(self, rng):
        net = _net([[1e-9]], L=3)
        h = sample_channels(net, rng)
        np.testing.assert_array_equal(combiner("MR", h, net, 0.1, 1e-15).v, h)

    def test_mr_masks_unserved(self, rng):
        net = _net([[1e-9], [1e-9]], L=2, serving=np.array([[True], [False]]))
        h = sample_channels(net, rng)
        v = combiner(CombinerKind.MR, h, net, 0.1, 1e-15).v
        np.testing.assert_array_equal(v[0, 1], 0)
        np.testing.assert_array_equal(v[0, 0], h[0, 0])

    def test_mmse_scalar(self, rng):
        beta, p, s2 = 2e-10, 0.1, 7e-16
        net = _net([[beta]])
        h = sample_channels(net, rng)
        v = combiner("MMSE", h, net, p, s2).v
        hh = h[0, 0, 0]
        expected = p * hh / (p * abs(hh) ** 2 + p * beta + s2)
        assert v[0, 0, 0] == pytest.approx(expected, rel=1e-10)

    def test_mmse_reduces_interference(self):
        cfg = NetworkConfig(M=4, L=2, K=2, area=50.0, cluster_top_n=4)
        net = drop_network(cfg, np.random.default_rng(11))
        h = sample_channels(net, np.random.default_rng(12), size=200)

        def interference_ratio(kind):
            v = combiner(kind, h, net, cfg.p, cfg.noise_var).v
            g = np.einsum("ekma,elma->ekl", np.conj(v), h)
            sig = np.abs(g[:, [0, 1], [0, 1]]) ** 2
            intf = np.abs(g[:, [0, 1], [1, 0]]) ** 2
            return np.mean(intf / sig)

        assert interference_ratio("MMSE") <= interference_ratio("MR")


class TestSinr:
    def _setup(self, E, beta=1e-10, M=1, K=1, L=1, seed=0):
        net = _net(np.full((M, K), beta), L=L)
        h = sample_channels(net, np.random.default_rng(seed), size=E)
        return net, h

    def test_single_sample_hand_value(self):
        p, s2 = 0.1, 1e-15
        net, h = self._setup(1)
        v = combiner("MR", h, net, p, s2).v
        est = ensemble_sinr(h, v, None, net.serving, p, s2)
        assert est.sinr[0, 0] == pytest.approx(p * abs(h[0, 0, 0, 0]) ** 2 / s2, rel=1e-12)

    def test_flat_without_pn(self):
        net, h = self._setup(50, M=3, K=2, L=2)
        v = combiner("MMSE", h, net, 0.1, 1e-15).v
        est = ensemble_sinr(h, v, np.zeros((50, 3, 2, 14)), net.serving, 0.1, 1e-15)
        assert np.all(est.sinr == est.sinr[:, :1])

    def test_gaussian_phase_desired_term(self):
        # E{exp(j theta)} = exp(-s/2) for theta ~ N(0, s): desired power scales by exp(-s)
        E, s = 40_000, 0.3
        p, s2 = 0.1, 1e-13
        net, h = self._setup(E, seed=1)
        v = combiner("MR", h, net, p, s2).v
        theta = np.zeros((E, 1, 1, 2))
        theta[..., 1] = np.random.default_rng(2).normal(0, math.sqrt(s), E)[:, None, None]
        est = ensemble_sinr(h, v, theta, net.serving, p, s2)
        assert est.desired[0, 1] / est.desired[0, 0] == pytest.approx(math.exp(-s), rel=0.05)

    def test_wrapper_matches_batch(self):
        net, h = self._setup(30, M=2, K=3, L=2)
        theta = np.random.default_rng(3).normal(0, 0.2, (30, 2, 3, 4))
        theta[..., 0] = 0
        v = combiner("MMSE", h, net, 0.1, 1e-15).v
        batch = ensemble_sinr(h, v, theta, net.serving, 0.1, 1e-15).sinr
        ens = ChannelRealization(h, theta)
        assert sinr_per_symbol(2, 3, v, ens, net, 0.1, 1e-15) == pytest.approx(batch[2, 3], rel=1e-12)

    def test_chunked_reduction_matches(self, monkeypatch):
        import cfpn.cf_system as cs
        net, h = self._setup(64, M=3, K=2, L=2)
        theta = np.random.default_rng(4).normal(0, 0.2, (64, 3, 2, 5))
        v = combiner("MR", h, net, 0.1, 1e-15).v
        full = ensemble_sinr(h, v, theta, net.serving, 0.1, 1e-15).sinr
        monkeypatch.setattr(cs, "_CHUNK_ELEMS", 1)
        chunked = ensemble_sinr(h, v, theta, net.serving, 0.1, 1e-15).sinr
        np.testing.assert_allclose(chunked, full, rtol=1e-12)


class TestSe:
    @pytest.mark.parametrize("sinr, se", [(0.0, 0.0), (1.0, 1.0), (15.0, 4.0)])
    def test_values(self, sinr, se):
        assert se_per_symbol(sinr) == pytest.approx(se)

    def test_negative(self):
        with pytest.raises(ValueError):
            se_per_symbol(-0.1)
