import numpy as np
import pytest

from cbtfed.dgn import DgnConfig, init_dgn
from cbtfed.exceptions import ShapeError, ValidationError
from cbtfed.generator import ConnectivityGenerator, Metadata
from cbtfed.regressor import (
    MetadataRegressor, SamplingRanges, build_regressor_corpus, calibrate, default_sampling_ranges,
    fit_regressor, init_regressor, predict_metadata, regressor_outputs, train_regressor,
)
from conftest import random_multigraphs

DGN = DgnConfig(6, 2, (4, 3), 4)


@pytest.fixture(scope="module")
def local():
    X = random_multigraphs(4, 6, 2, seed=11)
    gen = ConnectivityGenerator(layer_dims=DGN.layer_dims, filter_hidden=DGN.filter_hidden, depth=1,
                                base_channels=3, n_epochs=10, learning_rate=0.01, random_state=0).fit(X)
    return X, gen


class TestCorpus:
    def test_single_entry(self, local):
        X, gen = local
        corpus = build_regressor_corpus(X, gen, DGN, m_count=1, seed=0, epochs=2)
        assert len(corpus) == 1 and corpus[0].w_avg.manifest == corpus[0].w_o.manifest

    def test_reproducible(self, local):
        X, gen = local
        a = build_regressor_corpus(X, gen, DGN, m_count=2, seed=5, epochs=2)
        b = build_regressor_corpus(X, gen, DGN, m_count=2, seed=5, epochs=2)
        for ea, eb in zip(a, b):
            assert ea.w_avg == eb.w_avg and ea.w_o == eb.w_o and ea.target == eb.target

    def test_average_definition(self, local):
        X, gen = local
        from cbtfed.dgn import train_dgn, view_weights
        w0 = init_dgn(DGN, 0)
        m = Metadata(0.01, 0.02)
        (e,) = build_regressor_corpus(X, gen, DGN, seed=3, epochs=2, init_params=w0, metadata=[m])
        w_m = train_dgn(w0, gen.generate(m, random_state=[3, 3, 0]).subjects, 2, 0.0008, 0.4, 3, DGN,
                        lam=view_weights(X))
        assert np.allclose(e.w_avg.data, 0.5 * (w_m.data + e.w_o.data), rtol=0, atol=1e-15)

    def test_targets_within_ranges(self, local):
        X, gen = local
        ranges = SamplingRanges((-0.02, 0.03), (0.0, 0.01))
        corpus = build_regressor_corpus(X, gen, DGN, m_count=6, sampling_ranges=ranges, epochs=1)
        mus = [e.target.mu for e in corpus]
        sigmas = [e.target.sigma for e in corpus]
        assert -0.02 <= min(mus) and max(mus) <= 0.03 and 0 <= min(sigmas) and max(sigmas) <= 0.01

    def test_default_ranges(self):
        r = default_sampling_ranges(2.0, 0.4)
        assert r.mu == (-0.6, 0.6) and r.sigma == (0.0, 0.2)
        assert default_sampling_ranges(1.0).sigma == (0.0, 0.5)

    def test_bad_count(self, local):
        with pytest.raises(ValidationError):
            build_regressor_corpus(*local[:1], local[1], DGN, m_count=0)


class TestRegressor:
    def test_zero_network(self):
        z = init_regressor(5, (4,)).zeros_like()
        mu, sigma = regressor_outputs(z, np.random.default_rng(0).normal(size=(3, 5)))
        assert np.all(mu == 0) and np.allclose(sigma, np.log(2))

    def test_zero_residual_finite(self):
        p = calibrate(init_regressor(5, (4, 3), seed=2), [[0.1, 0.2], [0.3, 0.1]])
        w = init_dgn(DgnConfig(3, 1, (1,), 1))
        p = init_regressor(len(w), (4,), seed=1)
        m = predict_metadata(p, w, w)
        assert np.isfinite(m.mu) and m.sigma > 0

    def test_sigma_positive(self):
        rng = np.random.default_rng(0)
        p = init_regressor(4, (8,), 0)
        p = p.with_data(rng.normal(size=len(p)) * 3)
        assert np.all(regressor_outputs(p, rng.normal(size=(50, 4)) * 10)[1] > 0)

    def test_memorize_single_entry(self):
        x, y = np.random.default_rng(0).normal(size=(1, 6)), np.array([[0.03, 0.01]])
        trace = []
        fit_regressor(x, y, 540, 0.0005, 0, hidden=(8,), loss_trace=trace)
        assert trace[-1] < 1e-3

    def test_lr_zero_keeps_init(self):
        x, y = np.random.default_rng(0).normal(size=(4, 6)), np.random.default_rng(1).uniform(size=(4, 2))
        init = calibrate(init_regressor(6, (5,), 3), y)
        assert fit_regressor(x, y, 5, 0.0, 3, hidden=(5,), init=init) == init

    def test_calibrated_head_predicts_mean(self):
        y = np.array([[0.1, 0.02], [-0.1, 0.04], [0.3, 0.03]])
        p = calibrate(init_regressor(4, (3,), 0), y)
        mu, sigma = regressor_outputs(p, np.ones((1, 4)))
        assert np.isclose(mu[0], y[:, 0].mean()) and np.isclose(sigma[0], y[:, 1].mean())

    def test_recovers_held_out_mu(self):
        rng = np.random.default_rng(0)
        d1, d2 = rng.normal(size=30), rng.normal(size=30)
        y = np.column_stack([rng.uniform(-0.1, 0.1, 60), rng.uniform(0, 0.05, 60)])
        x = y[:, :1] * d1 + y[:, 1:] * d2 + 0.1 + 1e-3 * rng.normal(size=(60, 30))
        est = MetadataRegressor(hidden=(32,), n_epochs=300, learning_rate=0.003).fit(x[:50], y[:50])
        err = np.abs(est.predict(x[50:])[:, 0] - y[50:, 0])
        assert err.mean() < 0.05  # the corpus sigma range spans 0.05

    def test_errors(self):
        with pytest.raises(ValidationError):
            train_regressor([])
        p = init_regressor(5, (3,))
        with pytest.raises(ShapeError):
            regressor_outputs(p, np.zeros((1, 4)))
        with pytest.raises(ValidationError):
            regressor_outputs(p, np.full((1, 5), np.nan))

    def test_estimator_api(self):
        x, y = np.random.default_rng(0).normal(size=(8, 4)), np.random.default_rng(1).uniform(size=(8, 2))
        est = MetadataRegressor(hidden=(6,), n_epochs=3)
        assert est.fit(x, y).predict(x).shape == (8, 2) and len(est.loss_curve_) == 3
        assert est.get_params()["hidden"] == (6,)
