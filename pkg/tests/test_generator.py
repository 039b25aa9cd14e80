import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbtfed.dgn import DgnConfig, draw_samples, init_dgn, view_weights
from cbtfed.exceptions import DegenerateError, ShapeError, ValidationError
from cbtfed.generator import (
    ConnectivityGenerator, Metadata, RdgnConfig, generate_meta_domain, init_rdgn,
    mixture_value_and_grad, pretrain_generator, rdgn_forward, reconstruction_loss, sample_noise,
)
from cbtfed.params import ParamVector
from cbtfed.validation import invariant_violation, upper_triangle
from conftest import fd_check, random_multigraphs


def _rand_rdgn(cfg, seed, scale=0.3):
    p = init_rdgn(cfg, seed)
    return p.with_data(p.data + scale * np.random.default_rng(seed).normal(size=len(p)))


class TestNoise:
    def test_zero_sigma(self):
        n = sample_noise(Metadata(0.3, 0.0), 5, 0)
        assert np.all(n[~np.eye(5, dtype=bool)] == 0.3) and np.all(np.diag(n) == 0)

    @given(st.floats(-2, 2), st.floats(0, 2), st.integers(2, 9), st.integers(0, 50))
    def test_symmetric(self, mu, sigma, r, seed):
        n = sample_noise(Metadata(mu, sigma), r, seed)
        assert np.array_equal(n - n.T, np.zeros((r, r)))

    def test_moments(self):
        rng = np.random.default_rng(0)
        vals = np.concatenate([upper_triangle(sample_noise((0.2, 0.5), 4, rng)) for _ in range(10_000)])
        se = 0.5 / np.sqrt(vals.size)
        assert abs(vals.mean() - 0.2) < 4 * se

    def test_negative_sigma(self):
        with pytest.raises(ValidationError):
            sample_noise((0.0, -0.1), 4, 0)
        with pytest.raises(ValidationError):
            Metadata(float("nan"), 1.0)


class TestRdgn:
    def test_zero_params_zero_output(self):
        cfg = RdgnConfig(8, 2, 2, 4)
        zero = init_rdgn(cfg).zeros_like()
        assert np.array_equal(rdgn_forward(zero, np.random.default_rng(0).uniform(size=(8, 8)), cfg),
                              np.zeros((8, 8, 2)))

    def test_padding_contract(self):
        assert RdgnConfig(16, 1, 2, 2).padded == 16
        cfg = RdgnConfig(35, 2, 2, 2)
        assert cfg.padded == 36
        out = rdgn_forward(init_rdgn(cfg), np.ones((35, 35)) - np.eye(35), cfg)
        assert out.shape == (35, 35, 2)

    def test_prepadded_input_bit_exact(self):
        cfg = RdgnConfig(6, 2, 2, 3)
        p = _rand_rdgn(cfg, 1)
        c = random_multigraphs(1, 6, 1)[0, :, :, 0]
        padded = np.pad(c, ((0, 2), (0, 2)))
        assert rdgn_forward(p, c, cfg).tobytes() == rdgn_forward(p, padded, cfg).tobytes()

    @given(st.integers(0, 200))
    def test_output_invariants(self, seed):
        cfg = RdgnConfig(5, 3, 1, 3)
        rng = np.random.default_rng(seed)
        out = rdgn_forward(_rand_rdgn(cfg, seed, 1.0), rng.normal(size=(2, 5, 5)), cfg)
        assert invariant_violation(out) == ""

    def test_shape_errors(self):
        cfg = RdgnConfig(6, 2, 1, 2)
        with pytest.raises(ShapeError):
            rdgn_forward(init_rdgn(cfg), np.zeros((5, 5)), cfg)
        with pytest.raises(ShapeError):
            rdgn_forward(init_rdgn(RdgnConfig(6, 1, 1, 2)), np.zeros((6, 6)), cfg)


class TestPretraining:
    def test_reconstruction_zero_when_equal(self):
        x = random_multigraphs(2, 4, 2)
        assert reconstruction_loss(x, x) == 0.0

    @pytest.mark.parametrize("r,v", [(4, 2), (6, 3)])
    def test_mixture_gradient(self, r, v):
        dc, rc = DgnConfig(r, v, (3, 2), 4), RdgnConfig(r, v, 1, 2)
        wd = init_dgn(dc, 3)
        wd = wd.with_data(wd.data + 0.2 * np.random.default_rng(0).normal(size=len(wd)))
        wr = _rand_rdgn(rc, 2, 0.2)
        X = random_multigraphs(3, r, v, seed=1)
        lam = view_weights(X)
        idx = draw_samples(3, 3, 0.5, np.random.default_rng(0))
        _, gd, gr = mixture_value_and_grad(wd, wr, X, idx, lam, dc, rc)
        coords = np.random.default_rng(1).choice(len(wd), 20, replace=False)
        assert fd_check(lambda w: mixture_value_and_grad(wd.with_data(w), wr, X, idx, lam, dc, rc)[0],
                        wd.data.copy(), gd.data, coords) < 1e-4
        coords = np.random.default_rng(2).choice(len(wr), 20, replace=False)
        assert fd_check(lambda w: mixture_value_and_grad(wd, wr.with_data(w), X, idx, lam, dc, rc)[0],
                        wr.data.copy(), gr.data, coords) < 1e-4

    def test_training_beats_zero_baseline(self):
        dc, rc = DgnConfig(6, 2, (4, 3), 4), RdgnConfig(6, 2, 1, 4)
        X = random_multigraphs(4, 6, 2, seed=4)
        trace = []
        wd, wr = pretrain_generator(X, dc, rc, 30, 0.01, 0, loss_trace=trace)
        from cbtfed.dgn import subject_cbts
        rec = rdgn_forward(wr, subject_cbts(wd, X, dc), rc)
        assert reconstruction_loss(rec, X) < reconstruction_loss(np.zeros_like(X), X)
        assert trace[-1] < trace[0]


@pytest.fixture(scope="module")
def fitted():
    X = random_multigraphs(5, 8, 2, seed=7, scale=0.8)
    gen = ConnectivityGenerator(layer_dims=(6, 4), filter_hidden=6, depth=1, base_channels=4,
                                n_epochs=60, learning_rate=0.01, random_state=0).fit(X)
    return gen, X


class TestGeneration:
    def test_zero_noise_is_plain_decoding(self, fitted):
        gen, _ = fitted
        dom = gen.generate((0.0, 0.0), random_state=3)
        assert np.array_equal(dom.subjects, rdgn_forward(gen.rdgn_params_, gen.cbts_, gen.rdgn_config_))

    def test_same_seed_same_domain(self, fitted):
        gen, _ = fitted
        a = gen.generate((0.05, 0.1), random_state=[1, 2])
        b = gen.generate((0.05, 0.1), random_state=[1, 2])
        assert a.subjects.tobytes() == b.subjects.tobytes() and len(a) == len(gen.cbts_)

    def test_mu_sweep_monotone(self, fitted):
        gen, _ = fitted
        means = [upper_triangle(np.moveaxis(gen.generate((mu, 0.0)).subjects, 3, 1)).mean()
                 for mu in (-0.05, 0.0, 0.05)]
        assert means[0] < means[1] < means[2]

    def test_invariants_and_size(self, fitted):
        gen, _ = fitted
        dom = gen.generate(Metadata(0.1, 0.2), random_state=0, round_index=4, size=3)
        assert len(dom) == 3 and dom.round == 4 and invariant_violation(dom.subjects) == ""
        assert len(gen.generate((0, 0), size=0)) == 0

    def test_reconstruct_and_scales(self, fitted):
        gen, X = fitted
        assert gen.reconstruct(X).shape == X.shape
        assert gen.scale_ > 0 and gen.dispersion_ >= 0

    def test_needs_templates(self, fitted):
        gen, _ = fitted
        with pytest.raises(ValidationError):
            generate_meta_domain((0, 0), np.zeros((0, 8, 8)), gen.rdgn_params_, gen.rdgn_config_, 0)


class TestCollapseRestart:
    KW = dict(layer_dims=(4, 3), filter_hidden=4, depth=1, base_channels=2, n_epochs=10, learning_rate=0.3)

    def test_templates_alive(self):
        from cbtfed.generator import templates_alive
        live = np.ones((2, 4, 4)) - np.eye(4)
        dead = live.copy()
        dead[1] = 0
        assert templates_alive(live) and not templates_alive(dead)

    def test_collapsed_run_is_restarted(self):
        X = random_multigraphs(4, 6, 2, seed=1)
        with pytest.raises(DegenerateError):
            ConnectivityGenerator(**self.KW, random_state=0, max_restarts=0).fit(X)
        g = ConnectivityGenerator(**self.KW, random_state=0).fit(X)
        assert g.restarts_ >= 1 and g.scale_ > 0

    def test_always_collapsing_raises(self):
        kw = {**self.KW, "learning_rate": 3.0}
        with pytest.raises(DegenerateError):
            ConnectivityGenerator(**kw, random_state=0, max_restarts=2).fit(random_multigraphs(4, 6, 2, seed=1))
