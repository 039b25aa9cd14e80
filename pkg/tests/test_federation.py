import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbtfed.dgn import DgnConfig, init_dgn, train_dgn, view_weights
from cbtfed.exceptions import ConfigError, ShapeError, ValidationError
from cbtfed.federation import (
    ClientState, FedConfig, MetaSettings, aggregate, client_seed, client_update, history_to_csv,
    prepare_meta, run_ablation, run_federated, run_fedcbt, run_metafedcbt, sample_participants, site_seed,
)
from cbtfed.generator import Metadata
from cbtfed.optim import Adam
from cbtfed.params import ParamVector
from cbtfed.regressor import predict_metadata
from conftest import random_multigraphs

DGN = DgnConfig(6, 2, (4, 3), 4)
SETTINGS = MetaSettings(pretrain_epochs=5, m_count=3, corpus_epochs=2, regressor_epochs=5, hidden=(8,))


def vec(data):
    return ParamVector.from_arrays({"w": np.asarray(data, dtype=np.float64)})


@pytest.fixture(scope="module")
def sites():
    return [random_multigraphs(n, 6, 2, seed=20 + i, scale=1 + 0.3 * i) for i, n in enumerate((4, 5, 3))]


@pytest.fixture(scope="module")
def site_meta(sites):
    return prepare_meta(sites, DGN, SETTINGS, 0, rdgn_depth=1, rdgn_channels=3)


def fed(**kw):
    base = dict(k=3, t_max=3, e=2, lr=0.01, patience=50, seed=4, repetitions=2)
    base.update(kw)
    return FedConfig(**base)


class TestAggregate:
    def test_example(self):
        out = aggregate([vec([0.0, 4.0]), vec([4.0, 0.0])], [1, 3])
        assert np.array_equal(out.data, [3.0, 1.0])

    def test_reordered_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(1, 8))
            ws = [vec(rng.normal(size=7)) for _ in range(k)]
            ns = rng.integers(1, 50, size=k)
            order = rng.permutation(k)[::-1]
            ref = sum(ws[i].data * ns[i] for i in order) / ns.sum()
            assert np.max(np.abs(aggregate(ws, ns).data - ref)) < 1e-12

    @given(st.lists(st.tuples(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(1, 500)),
                    min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, items, rnd):
        ws = [vec(w) for w, _ in items]
        ns = [n for _, n in items]
        perm = list(range(len(items)))
        rnd.shuffle(perm)
        a = aggregate(ws, ns)
        b = aggregate([ws[i] for i in perm], [ns[i] for i in perm])
        assert np.array_equal(a.data, b.data)

    def test_errors(self):
        with pytest.raises(ValidationError):
            aggregate([], [])
        with pytest.raises(ValidationError):
            aggregate([vec([1.0])], [0])
        with pytest.raises(ShapeError):
            aggregate([vec([1.0]), vec([1.0, 2.0])], [1, 1])


class TestParticipants:
    def test_count_and_determinism(self):
        for t in range(20):
            p = sample_participants(3, 0.6, t, 7)
            assert len(p) == 2 and list(p) == sorted(set(p)) and p == sample_participants(3, 0.6, t, 7)

    def test_full_participation(self):
        assert sample_participants(4, 1.0, 0, 0) == (0, 1, 2, 3)

    def test_rounds_differ(self):
        assert len({sample_participants(5, 0.4, t, 0) for t in range(30)}) > 1

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            sample_participants(3, 1.5, 0, 0)


class TestClientUpdate:
    def test_lr_zero(self, sites):
        w = init_dgn(DGN, 1)
        c = ClientState(0, sites[0], sites[0], w)
        assert client_update(w, c, fed(lr=0.0), DGN, 0) == w

    def test_single_site_round_equivalence(self, sites):
        cfg = fed(k=1, t_max=4, participation=1.0)
        w0 = init_dgn(DGN, 0)
        res = run_fedcbt(sites[:1], cfg, DGN, init=w0)
        w = w0
        for t in range(4):
            w = train_dgn(w, sites[0], 2, 0.01, 0.4, client_seed(4, 0, t, 0), DGN)
        assert np.max(np.abs(res.final_params.data - w.data)) < 1e-10


class TestRunLoop:
    def test_early_stop_on_plateau(self, sites):
        res = run_fedcbt(sites, fed(lr=0.0, t_max=30, patience=3), DGN)
        assert res.stopped_early and res.rounds_run == 4

    def test_zero_size_meta_domain_is_fedcbt(self, sites, site_meta):
        a = run_fedcbt(sites, fed(), DGN)
        b = run_metafedcbt(sites, fed(meta_domain_size=0), DGN, site_meta)
        assert a.final_params == b.final_params
        assert all(r.metadata for r in b.history)

    def test_single_site_mode_is_continuous_training(self, sites):
        cfg = fed(mode="dgn", t_max=3)
        w0 = init_dgn(DGN, 4)
        res = run_federated(sites, cfg, DGN, init=w0)
        ref = train_dgn(w0, sites[0], 6, 0.01, 0.4, site_seed(4, 0, 0), DGN, optimizer=Adam(0.01))
        assert np.max(np.abs(res.final_params.data - ref.data)) < 1e-12

    def test_rand_pinned_to_regressor_is_meta(self, sites, site_meta):
        def pinned(k, t, w_local, w_ref):
            return predict_metadata(site_meta[k].regressor, w_local, w_ref)
        a = run_metafedcbt(sites, fed(), DGN, site_meta)
        b = run_federated(sites, fed(mode="rand_fedcbt"), DGN, site_meta=site_meta, metadata_source=pinned)
        assert a.final_params == b.final_params and a.history_csv() == b.history_csv()

    def test_rand_modes_repeat(self, sites, site_meta):
        runs = run_ablation("rand_fedcbt", sites, fed(t_max=2, repetitions=3), DGN, site_meta)
        assert [r.repetition for r in runs] == [0, 1, 2]
        assert len({r.history_csv() for r in runs}) == 3
        assert len(run_ablation("fedcbt", sites, fed(t_max=2), DGN)) == 1

    def test_meta_sizes(self, sites, site_meta):
        seen = []

        def spy(k, t, w_local, w_ref):
            seen.append((k, t))
            return Metadata(0.01, 0.01)
        res = run_federated(sites, fed(mode="meta_dgn", t_max=2), DGN, site_meta=site_meta, metadata_source=spy)
        assert sorted(seen) == [(k, t) for k in range(3) for t in range(2)]
        assert res.rounds_run == 2

    def test_threads_match_serial(self, sites, site_meta):
        a = run_metafedcbt(sites, fed(n_workers=1), DGN, site_meta)
        b = run_metafedcbt(sites, fed(n_workers=3), DGN, site_meta)
        assert a.history_csv() == b.history_csv() and a.final_params == b.final_params

    def test_only_participants_train(self, sites):
        res = run_fedcbt(sites, fed(t_max=1), DGN)
        rec = res.history[0]
        assert len(rec.participants) == 2 and set(rec.loss) == set(rec.participants)
        assert set(rec.centeredness) == {0, 1, 2}

    def test_history_csv(self, sites, site_meta):
        res = run_metafedcbt(sites, fed(t_max=2), DGN, site_meta)
        lines = res.history_csv().splitlines()
        assert lines[0] == "round,site,loss,centeredness,mu,sigma"
        assert len(lines) == 1 + 2 * 2
        assert all(line.split(",")[4] for line in lines[1:])
        plain = history_to_csv(run_fedcbt(sites, fed(t_max=1), DGN).history).splitlines()
        assert all(line.endswith(",,") for line in plain[1:])

    def test_config_errors(self, sites):
        with pytest.raises(ConfigError):
            run_fedcbt(sites[:2], fed(), DGN)
        with pytest.raises(ConfigError):
            run_federated(sites, fed(mode="metafedcbt"), DGN)
        with pytest.raises(ConfigError):
            FedConfig(participation=1.5)
        with pytest.raises(ConfigError):
            FedConfig(mode="fedprox")


def test_view_weights_follow_local_data(sites, site_meta):
    c = ClientState(0, sites[0], np.concatenate([sites[0], sites[1][:2]]), init_dgn(DGN))
    assert np.array_equal(c.lam, view_weights(sites[0])) and c.n == 4
