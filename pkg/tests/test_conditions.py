import csv
import io
import json
import math

import numpy as np
import pytest
from scipy.special import gammaln

from gencap.conditions import (
    REFERENCE_VALUES,
    TheoremInputs,
    activation_flips,
    c2_curve,
    condition_histograms,
    estimate_c3,
    estimate_mu,
    gauss_product_check,
    lemma_linear_check,
    theorem1_bound,
    theorem_inputs_for,
    unit_norm,
)
from gencap.data import synthetic_blobs
from gencap.network import Network, TrainConfig, fit, forward, init_network

from oracles import brute_force_mu, random_layers


class TestMu:
    def test_identity_network(self):
        net = Network((np.eye(2), np.eye(2)))
        est = estimate_mu(net, np.array([1.0, 1.0]))
        assert est.mu == pytest.approx(1.0, rel=1e-14)
        assert est.triples == 1 and est.excluded == 0

    def test_triple_count(self):
        net = init_network([3, 4, 4, 4, 2], seed=0)
        # choose 3 of the 5 indices 0..4
        assert estimate_mu(net, np.ones(3)).triples == math.comb(5, 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        layers = random_layers(rng, [4, 5, 5, 5, 3])
        x = rng.normal(size=4)
        got, want = estimate_mu(Network(tuple(layers)), x).mu, brute_force_mu(layers, x)
        if math.isinf(want):
            # every triple degenerate: a hidden layer is fully dead at x
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, rel=1e-10)

    def test_brute_force_mostly_defined(self):
        rng = np.random.default_rng(100)
        finite = 0
        for _ in range(20):
            layers = random_layers(rng, [4, 8, 8, 8, 3])
            x = rng.normal(size=4)
            want = brute_force_mu(layers, x)
            if math.isfinite(want):
                finite += 1
                assert estimate_mu(Network(tuple(layers)), x).mu == pytest.approx(want, rel=1e-10)
        assert finite >= 15

    def test_dead_subnetwork_excluded(self):
        # second hidden layer is fully dead for positive inputs
        net = Network((np.eye(2), -np.eye(2), np.ones((1, 2))))
        est = estimate_mu(net, np.array([1.0, 2.0]))
        assert est.excluded > 0
        assert est.excluded < est.triples or math.isnan(est.mu)


class TestC2:
    def make(self, pre):
        pre = np.asarray(pre, dtype=float)
        return Network((np.diag(pre), np.ones((1, len(pre))))), np.ones(len(pre))

    def test_counting(self):
        net, x = self.make([0.05, 0.2, 0.5, 1.0])
        curve = c2_curve(net, x, [0.1])
        assert curve.ratios[0, 0] == 0.25
        assert curve.c2 == pytest.approx(2.5)

    def test_saturation(self):
        net, x = self.make([0.05, -0.2, 0.5, 1.0])
        assert c2_curve(net, x, [2.0]).ratios[0, 0] == 1.0

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(0)
        net = Network(tuple(random_layers(rng, [5, 30, 30, 3])))
        for _ in range(10):
            curve = c2_curve(net, rng.normal(size=5), np.logspace(-4, 1, 40))
            assert np.all(np.diff(curve.ratios, axis=1) >= 0)
            assert curve.ratios.min() >= 0 and curve.ratios.max() <= 1

    def test_grid_validation(self):
        net, x = self.make([1.0])
        with pytest.raises(ValueError):
            c2_curve(net, x, [0.0, 0.1])


class TestC3:
    def test_hand_value(self):
        net = Network((np.array([[3.0, 4.0], [0.0, 0.0]]), np.ones((1, 2))))
        _, trace = forward(net, np.array([1.0, 1.0]))
        assert trace.active[0].tolist() == [True, False]
        assert estimate_c3(net, trace).per_layer[0] == pytest.approx(math.sqrt(2))

    def test_uniform_active_rows(self):
        net = Network((np.ones((3, 2)), np.ones((1, 3))))
        _, trace = forward(net, np.array([1.0, 1.0]))
        assert estimate_c3(net, trace).per_layer[0] == pytest.approx(1.0)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        layers = random_layers(rng, [4, 6, 6, 3])
        net = Network(tuple(layers))
        x = rng.normal(size=4)
        _, trace = forward(net, x)
        expected = []
        h = x
        for i, w in enumerate(layers):
            z = w @ h
            active = z > 0 if i < len(layers) - 1 else np.ones(len(z), bool)
            rows = [math.sqrt(sum(v * v for v in row)) for row in w]
            dw = math.sqrt(sum(r * r for r, a in zip(rows, active) if a))
            expected.append(math.sqrt(len(rows)) * max(rows) / dw)
            h = np.where(z > 0, z, 0)
        np.testing.assert_allclose(estimate_c3(net, trace).per_layer, expected, rtol=1e-12)
        assert estimate_c3(net, trace).c3 == pytest.approx(max(expected))

    def test_dead_layer_is_undefined(self):
        net = Network((-np.eye(2), np.ones((1, 2))))
        _, trace = forward(net, np.array([1.0, 1.0]))
        c3 = estimate_c3(net, trace)
        assert math.isnan(c3.per_layer[0]) and math.isnan(c3.c3)


def inputs(**kw):
    base = dict(
        sigmas=(0.01,), delta=0.1, m=1000, dims=(100, 100), frobenius=(10.0,),
        mu=0.25, c2=2.0, c3=1.5, mean_output_norm=1.0,
    )
    base.update(kw)
    return TheoremInputs(**base)


class TestTheorem:
    def test_gamma(self):
        assert theorem1_bound(inputs()).gammas[0] == pytest.approx(1.6, rel=1e-14)

    def test_c_delta(self):
        inp = inputs(sigmas=(0.01,) * 10, dims=(1000,) * 11, frobenius=(10.0,) * 10)
        assert theorem1_bound(inp).c_delta == pytest.approx(2 * math.sqrt(math.log(1e5)), rel=1e-15)
        assert theorem1_bound(inp).c_delta == pytest.approx(6.786140, abs=1e-6)

    def test_zero_sigmas(self):
        res = theorem1_bound(inputs(sigmas=(0.0,)))
        assert res.sharpness_term == 0.0 and res.kl_term == math.inf

    def test_structure(self):
        inp = inputs(sigmas=(0.01, 0.02), dims=(50, 40, 10), frobenius=(5.0, 3.0), c2=2.0, c3=1.5, lipschitz=2.0, mean_output_norm=0.7)
        res = theorem1_bound(inp)
        g1 = 0.01 * math.sqrt(40 * 50) / (0.0625 * 5.0)
        g2 = 0.02 * math.sqrt(10 * 40) / (0.0625 * 3.0)
        cd = 2 * math.sqrt(math.log(2 * 40 / 0.1))
        sharp = ((1 + g1) * (1 + g2) - 1 + (1 + g1 * 3) * (1 + g2 * 3) * ((1 + g1 * cd * 2) * (1 + g2 * cd * 2) - 1)) * 2.0 * 0.7
        kl = math.sqrt((25 / 0.01 ** 2 + 9 / 0.02 ** 2 + math.log(2000 / 0.1)) / 1000)
        assert res.sharpness_term == pytest.approx(sharp, rel=1e-12)
        assert res.kl_term == pytest.approx(kl, rel=1e-12)
        assert res.total == pytest.approx(sharp + kl, rel=1e-12)

    def test_tradeoff_in_sigma(self):
        grid = np.logspace(-4, -1, 15)
        for layer in range(2):
            sharp, kl = [], []
            for s in grid:
                sig = [0.01, 0.01]
                sig[layer] = s
                res = theorem1_bound(inputs(sigmas=tuple(sig), dims=(20, 20, 5), frobenius=(4.0, 2.0)))
                sharp.append(res.sharpness_term)
                kl.append(res.kl_term)
            assert all(a < b for a, b in zip(sharp, sharp[1:]))
            assert all(a > b for a, b in zip(kl, kl[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            inputs(delta=1.5)
        with pytest.raises(ValueError):
            inputs(mu=0.0)
        with pytest.raises(ValueError):
            inputs(sigmas=(0.1, 0.1))


class TestGaussProduct:
    def test_scalar_half_normal(self):
        res = gauss_product_check([[1.0]], [[1.0]], 1.0, replicates=20000, seed=0)
        assert res.bound == 1.0 and res.passed
        assert abs(res.mc - math.sqrt(2 / math.pi)) <= 4 * res.stderr

    def test_zero_sigma(self):
        res = gauss_product_check(np.eye(2), np.eye(2), 0.0, replicates=100)
        assert res.mc == 0.0 and res.bound == 0.0 and res.passed

    @pytest.mark.parametrize("seed", range(20))
    def test_random_matrices(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        assert gauss_product_check(A, B, 0.5, replicates=2000, seed=seed).passed


class TestLemmaLinear:
    def test_zero_sigma(self):
        net = init_network([3, 4, 4, 2], seed=1)
        res = lemma_linear_check(net, np.ones(3), [0.0, 0.0, 0.0], mu=0.5, replicates=10)
        assert res.mc == 0.0 and res.bound == 0.0 and res.passed

    def test_single_layer(self):
        n, sigma = 4, 0.1
        net = Network((np.eye(n),))
        x = unit_norm(np.arange(1.0, n + 1.0))
        res = lemma_linear_check(net, x, [sigma], mu=1.0, replicates=20000, seed=2)
        # ||nu x|| = sigma * chi_n for unit x
        chi_mean = math.sqrt(2) * math.exp(gammaln((n + 1) / 2) - gammaln(n / 2))
        assert abs(res.mc - sigma * chi_mean) <= 4 * res.stderr
        assert res.bound == pytest.approx(sigma * math.sqrt(n * n) / math.sqrt(n), rel=1e-12)
        assert res.passed

    @pytest.mark.parametrize("seed", range(20))
    def test_random_three_layer_nets(self, seed):
        rng = np.random.default_rng(seed)
        net = init_network([8, 10, 10, 4], seed=seed)
        x = unit_norm(rng.normal(size=8))
        mu = estimate_mu(net, x).mu
        assert lemma_linear_check(net, x, [0.01] * 3, mu, replicates=300, seed=seed).passed


@pytest.fixture(scope="module")
def pair():
    data = synthetic_blobs(4, 40, 10, 0.3, seed=2)
    init = init_network([10, 32, 32, 32, 4], seed=5)
    trained = fit(init, data, TrainConfig(max_epochs=100, seed=1)).network
    return init, trained, data


class TestHistograms:
    def test_both_baselines_finite(self, pair):
        init, trained, data = pair
        for net in (init, trained):
            stats = condition_histograms(net, data.inputs[:60])
            assert stats.finite_fraction >= 0.95
            assert stats.mu > 0

    def test_aggregate_is_min(self, pair):
        _, trained, data = pair
        stats = condition_histograms(trained, data.inputs[:30])
        assert stats.mu == np.nanmin(stats.mu_per_input)
        assert stats.c2 == np.nanmax(stats.c2_per_input)

    def test_rescaling_applied(self, pair):
        _, trained, data = pair
        X = data.inputs[:5] * 7.0
        a = condition_histograms(trained, X)
        b = condition_histograms(trained, data.inputs[:5])
        np.testing.assert_allclose(a.mu_per_input, b.mu_per_input, rtol=1e-12)

    def test_reports(self, pair):
        _, trained, data = pair
        stats = condition_histograms(trained, data.inputs[:10], deltas=[0.01, 0.1], label="trained")
        summary = json.loads(stats.to_json())
        assert summary["reference"] == REFERENCE_VALUES
        assert summary["label"] == "trained"
        rows = list(csv.DictReader(io.StringIO(stats.c2_csv())))
        assert len(rows) == 3 * 2 and list(rows[0]) == ["layer", "delta", "ratio"]
        print(f"\nmu={stats.mu:.3f} C2={stats.c2:.3f} C3={stats.c3:.3f} reference {REFERENCE_VALUES}")

    def test_theorem_inputs(self, pair):
        _, trained, data = pair
        stats = condition_histograms(trained, data.inputs[:20])
        inp = theorem_inputs_for(trained, data.inputs, stats, [1e-3] * 4, m=len(data))
        res = theorem1_bound(inp)
        assert math.isfinite(res.total) and res.total > 0


def test_activation_flips_grow_with_sigma():
    net = init_network([6, 40, 40, 3], seed=0)
    x = unit_norm(np.random.default_rng(1).normal(size=6))
    small = activation_flips(net, x, [1e-4] * 3, replicates=50)
    large = activation_flips(net, x, [1e-1] * 3, replicates=50)
    assert np.all(large >= small) and large.sum() > 0
