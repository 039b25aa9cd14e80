"""Federated template learning: plain federated averaging and the metadata-driven variant.

One round of the federated modes:

1. draw ``ceil(participation * K)`` participating sites;
2. each participant copies the global weights, trains ``e`` epochs on its
   (possibly augmented) data with a fresh Adam, and returns its weights;
3. the server averages participant weights by original subject count;
4. metadata modes then estimate ``(mu, sigma)`` per participant, generate a
   meta-domain and replace that site's augmented data for the next round.

The single-site modes (``dgn``, ``rand_dgn``, ``meta_dgn``) run the same
loop without a server: every site trains its own model with Adam state kept
across rounds, and metadata is estimated from the round-update residual
``w_k^(t) - w_k^(t+1)``.

Early stopping monitors the mean over sites of the training centeredness of
each site's median template and returns the best round's weights.

All randomness is derived from ``cfg.seed`` through counter-style
``numpy.random.default_rng([seed, ...])`` keys, so results do not depend on
worker scheduling.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dgn import DgnConfig, ceil_count, global_cbt, init_dgn, train_dgn, view_weights
from .evaluation import centeredness
from .exceptions import ConfigError, ShapeError, ValidationError
from .generator import ConnectivityGenerator, Metadata
from .optim import Adam
from .params import ParamVector, save_checkpoint
from .regressor import (
    SamplingRanges, build_regressor_corpus, default_sampling_ranges, predict_metadata,
    train_regressor,
)

MODES = ("dgn", "rand_dgn", "meta_dgn", "fedcbt", "rand_fedcbt", "metafedcbt")
FEDERATED = {"fedcbt", "rand_fedcbt", "metafedcbt"}
AUGMENTED = {"rand_dgn", "meta_dgn", "rand_fedcbt", "metafedcbt"}
RANDOM = {"rand_dgn", "rand_fedcbt"}

# stream tags for seed derivation
_TRAIN, _PARTICIPANTS, _RANDMETA, _GENERATE, _SITE = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class FedConfig:
    k: int = 3
    t_max: int = 500
    e: int = 2
    participation: float = 0.6
    lr: float = 0.0008
    sample_fraction: float = 0.4
    patience: int = 11
    mode: str = "metafedcbt"
    seed: int = 0
    repetitions: int = 10
    meta_domain_size: int | None = None
    n_workers: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must lie in (0, 1], got {self.participation}")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        for name in ("k", "t_max", "e", "patience", "repetitions", "n_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.meta_domain_size is not None and self.meta_domain_size < 0:
            raise ConfigError("meta_domain_size must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class MetaSettings:
    """Budgets for the per-site generator, regressor corpus and regressor."""

    pretrain_epochs: int = 100
    pretrain_lr: float = 0.005
    alpha: float = 1.0
    m_count: int = 32
    corpus_epochs: int = 40
    corpus_lr: float = 0.0008
    regressor_epochs: int = 40
    regressor_lr: float = 0.0005
    hidden: tuple = (256, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("pretrain_epochs", "m_count", "corpus_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.regressor_epochs < 0:
            raise ConfigError("regressor_epochs must be >= 0")


@dataclass
class RoundRecord:
    round: int
    participants: tuple
    loss: dict
    centeredness: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.participants:
            raise ValidationError("a round needs at least one participant")


@dataclass
class ClientState:
    site: int
    data: np.ndarray
    augmented: np.ndarray
    params: ParamVector
    lam: np.ndarray = None

    def __post_init__(self):
        if self.lam is None:
            self.lam = view_weights(self.data)

    @property
    def n(self):
        return self.data.shape[0]


@dataclass
class ServerState:
    params: ParamVector
    round: int = 0
    best_score: float = math.inf
    since_improvement: int = 0


@dataclass
class FedResult:
    """Outcome of one run. ``site_params[k]`` is the model site ``k`` evaluates with."""

    params: ParamVector
    final_params: ParamVector
    site_params: list
    history: list
    mode: str
    rounds_run: int
    stopped_early: bool
    repetition: int = 0

    def history_csv(self):
        return history_to_csv(self.history)


@dataclass
class SiteMeta:
    """Everything a site needs to synthesize meta-domains locally."""

    generator: ConnectivityGenerator
    regressor: ParamVector | None
    ranges: SamplingRanges


# ---------------------------------------------------------------------------
# primitives

def aggregate(weights, counts):
    """sum_k (N_k / N) w_k over the given clients, bitwise independent of their order."""
    if len(weights) != len(counts) or not weights:
        raise ValidationError("need equally many weights and counts, at least one")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValidationError("sample counts must be positive")
    for w in weights[1:]:
        if w.manifest != weights[0].manifest:
            raise ShapeError("client parameter manifests differ")
    total = counts.sum()
    terms = np.stack([(n / total) * w.data for w, n in zip(weights, counts)])
    # summing each coordinate's terms in sorted order makes client order irrelevant
    terms.sort(axis=0)
    return weights[0].with_data(terms.sum(axis=0))


def sample_participants(k, participation, round_index, seed):
    """Sorted ids of ceil(participation * k) distinct sites for this round."""
    if not 0 < participation <= 1:
        raise ConfigError(f"participation must lie in (0, 1], got {participation}")
    count = ceil_count(participation, k)
    if count >= k:
        return tuple(range(k))
    rng = np.random.default_rng([seed, _PARTICIPANTS, round_index])
    return tuple(sorted(int(i) for i in rng.choice(k, count, replace=False)))


def client_seed(seed, repetition, round_index, site):
    """Seed of one client's local training in one round of a federated mode."""
    return [seed, _TRAIN, repetition, round_index, site]


def site_seed(seed, repetition, site):
    """Seed of a site's whole local run in a single-site mode."""
    return [seed, _SITE, repetition, site]


def client_update(global_w, client, cfg, dgn_cfg, round_index, repetition=0, loss_trace=None):
    """Copy the global weights and train ``cfg.e`` epochs on the augmented data."""
    global_w.check_compatible(client.params)
    return train_dgn(global_w, client.augmented, cfg.e, cfg.lr, cfg.sample_fraction,
                     client_seed(cfg.seed, repetition, round_index, client.site), dgn_cfg,
                     lam=client.lam, loss_trace=loss_trace)


def _as_tensors(site):
    t = np.ascontiguousarray(getattr(site, "tensors", site), dtype=np.float64)
    if t.ndim != 4 or t.shape[0] == 0:
        raise ValidationError("every site needs a nonempty (n, R, R, V) training set")
    return t


# ---------------------------------------------------------------------------
# the round loop

def run_federated(sites, cfg, dgn_cfg, *, init=None, site_meta=None, metadata_source=None,
                  repetition=0, checkpoint_dir=None):
    """Run ``cfg.mode`` on per-site training sets and return a :class:`FedResult`.

    ``metadata_source(site, round, w_local, w_reference) -> Metadata``
    overrides how augmentation metadata is chosen (regressor or random draw
    by default, following the mode).
    """
    mode = cfg.mode
    data = [_as_tensors(s) for s in sites]
    if len(data) != cfg.k:
        raise ConfigError(f"config expects k={cfg.k} sites, got {len(data)}")
    federated = mode in FEDERATED
    augmented_mode = mode in AUGMENTED
    if augmented_mode and site_meta is None:
        raise ConfigError(f"mode {mode!r} needs per-site generators (site_meta)")
    if site_meta is not None and len(site_meta) != cfg.k:
        raise ConfigError("need one generator/regressor set per site")
    if augmented_mode and metadata_source is None:
        metadata_source = _default_metadata_source(mode, cfg, site_meta, repetition)
    if augmented_mode and site_meta is not None:
        for sm in site_meta:
            if sm.generator.dgn_config_.r != dgn_cfg.r or sm.generator.rdgn_config_.v != dgn_cfg.v:
                raise ConfigError("generator dimensions do not match the DGN configuration")
            if mode in ("meta_dgn", "metafedcbt") and metadata_source is None and sm.regressor is None:
                raise ConfigError("metadata modes need a trained regressor per site")

    w0 = init_dgn(dgn_cfg, cfg.seed) if init is None else init
    if w0.manifest != dgn_cfg.manifest():
        raise ConfigError("initial parameters do not match the DGN configuration")
    clients = [ClientState(k, x, x, w0) for k, x in enumerate(data)]
    server = ServerState(w0)
    optims = [Adam(cfg.lr) for _ in clients] if not federated else None
    history = []
    best = None
    stopped = False
    pool = ThreadPoolExecutor(max_workers=cfg.n_workers) if cfg.n_workers > 1 else None

    def local_job(k, t):
        c = clients[k]
        trace = []
        if federated:
            w = client_update(server.params, c, cfg, dgn_cfg, t, repetition, trace)
        else:
            w = train_dgn(c.params, c.augmented, cfg.e, cfg.lr, cfg.sample_fraction,
                          site_seed(cfg.seed, repetition, k), dgn_cfg, lam=c.lam,
                          optimizer=optims[k], start_epoch=t * cfg.e, loss_trace=trace)
        return w, trace[-1]

    try:
        for t in range(cfg.t_max):
            if federated:
                parts = sample_participants(cfg.k, cfg.participation, t, cfg.seed)
            else:
                parts = tuple(range(cfg.k))
            jobs = [(k, t) for k in parts]
            results = list(pool.map(lambda a: local_job(*a), jobs)) if pool else [local_job(*a) for a in jobs]
            previous = {k: clients[k].params for k in parts}
            losses = {}
            for k, (w, loss) in zip(parts, results):
                clients[k].params = w
                losses[k] = loss
            if federated:
                server.params = aggregate([clients[k].params for k in parts],
                                          [clients[k].n for k in parts])
                evaluated = [server.params] * cfg.k
            else:
                evaluated = [c.params for c in clients]
            cent = {k: centeredness(global_cbt(evaluated[k], clients[k].data, dgn_cfg),
                                    clients[k].data) for k in range(cfg.k)}
            meta = {}
            if augmented_mode:
                for k in parts:
                    ref = server.params if federated else previous[k]
                    m = metadata_source(k, t, clients[k].params, ref)
                    meta[k] = m
                    sm = site_meta[k]
                    size = clients[k].n if cfg.meta_domain_size is None else cfg.meta_domain_size
                    dom = sm.generator.generate(
                        m, random_state=[cfg.seed, _GENERATE, repetition, t, k],
                        round_index=t, size=min(size, len(sm.generator.cbts_)))
                    clients[k].augmented = np.concatenate([clients[k].data, dom.subjects])
            history.append(RoundRecord(t, parts, losses, cent, meta))
            server.round = t + 1

            score = float(np.mean(list(cent.values())))
            if score < server.best_score:
                server.best_score = score
                server.since_improvement = 0
                best = list(evaluated)
            else:
                server.since_improvement += 1
            if checkpoint_dir is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"{mode}_rep{repetition}_round{t + 1}.ckpt",
                                server.params if federated else clients[0].params)
            if server.since_improvement >= cfg.patience:
                stopped = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    final = server.params if federated else clients[0].params
    return FedResult(
        params=best[0],
        final_params=final,
        site_params=best,
        history=history,
        mode=mode,
        rounds_run=server.round,
        stopped_early=stopped,
        repetition=repetition,
    )


def _default_metadata_source(mode, cfg, site_meta, repetition):
    if mode in RANDOM:
        def draw(k, t, w_local, w_ref):
            rng = np.random.default_rng([cfg.seed, _RANDMETA, repetition, t, k])
            return site_meta[k].ranges.draw(rng)
        return draw

    def estimate(k, t, w_local, w_ref):
        reg = site_meta[k].regressor
        if reg is None:
            raise ConfigError(f"site {k} has no trained metadata regressor")
        if reg.manifest[0][1][0] != len(w_local):
            raise ConfigError("regressor input width does not match the DGN parameter count")
        return predict_metadata(reg, w_local, w_ref)
    return estimate


def run_fedcbt(sites, cfg, dgn_cfg, *, init=None, checkpoint_dir=None):
    """Plain federated averaging of local DGNs."""
    return run_federated(sites, _with_mode(cfg, "fedcbt"), dgn_cfg, init=init,
                         checkpoint_dir=checkpoint_dir)


def run_metafedcbt(sites, cfg, dgn_cfg, site_meta, *, init=None, metadata_source=None,
                   checkpoint_dir=None):
    """Federated averaging with per-round regressor-guided meta-domain augmentation."""
    return run_federated(sites, _with_mode(cfg, "metafedcbt"), dgn_cfg, init=init,
                         site_meta=site_meta, metadata_source=metadata_source,
                         checkpoint_dir=checkpoint_dir)


def run_ablation(mode, sites, cfg, dgn_cfg, site_meta=None, *, init=None, repetitions=None):
    """Run any mode; random modes repeat ``cfg.repetitions`` times. Returns a list of results."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; choose from {MODES}")
    reps = (repetitions or cfg.repetitions) if mode in RANDOM else 1
    c = _with_mode(cfg, mode)
    return [run_federated(sites, c, dgn_cfg, init=init, site_meta=site_meta, repetition=r)
            for r in range(reps)]


def _with_mode(cfg, mode):
    from dataclasses import replace
    return replace(cfg, mode=mode)


# ---------------------------------------------------------------------------
# pre-federation preparation

def prepare_site_meta(site, dgn_cfg, settings, seed, *, init=None, site_index=0,
                      with_regressor=True, rdgn_depth=2, rdgn_channels=16):
    """Pretrain one site's generator and (optionally) its metadata regressor."""
    x = _as_tensors(site)
    sseed = [seed, 6, site_index]
    gen = ConnectivityGenerator(
        layer_dims=dgn_cfg.layer_dims, filter_hidden=dgn_cfg.filter_hidden,
        depth=rdgn_depth, base_channels=rdgn_channels,
        n_epochs=settings.pretrain_epochs, learning_rate=settings.pretrain_lr,
        alpha=settings.alpha, random_state=sseed).fit(x)
    ranges = default_sampling_ranges(gen.scale_, gen.dispersion_)
    reg = None
    if with_regressor:
        w0 = init_dgn(dgn_cfg, seed) if init is None else init
        corpus = build_regressor_corpus(
            x, gen, dgn_cfg, settings.m_count, ranges, seed=sseed, init_params=w0,
            epochs=settings.corpus_epochs, lr=settings.corpus_lr)
        reg = train_regressor(corpus, settings.regressor_epochs, settings.regressor_lr,
                              sseed, hidden=settings.hidden)
    return SiteMeta(gen, reg, ranges)


def prepare_meta(sites, dgn_cfg, settings, seed, *, init=None, with_regressor=True, n_workers=1,
                 rdgn_depth=2, rdgn_channels=16):
    jobs = [(k, s) for k, s in enumerate(sites)]

    def one(args):
        k, s = args
        return prepare_site_meta(s, dgn_cfg, settings, seed, init=init, site_index=k,
                                 with_regressor=with_regressor, rdgn_depth=rdgn_depth,
                                 rdgn_channels=rdgn_channels)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


# ---------------------------------------------------------------------------
# telemetry

HISTORY_COLUMNS = ("round", "site", "loss", "centeredness", "mu", "sigma")


def history_to_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for rec in history:
        for k in rec.participants:
            m = rec.metadata.get(k)
            w.writerow([rec.round, k, repr(float(rec.loss[k])), repr(float(rec.centeredness[k])),
                        "" if m is None else repr(m.mu), "" if m is None else repr(m.sigma)])
    return buf.getvalue()
