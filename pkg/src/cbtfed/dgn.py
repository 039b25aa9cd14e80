"""Deep graph normalizer: edge-conditioned message passing to a subject template.

Each subject is a fully connected R-node graph whose edge (i, j) carries
the V view weights. Node features start as the constant 1-vector and each
layer computes::

    h_i' = ReLU(W_root h_i + mean_{j != i} F(e_ij) h_j + b)

where the edge filter ``F`` is a one-hidden-layer ReLU network emitting a
d_out x d_in matrix. The template is the pairwise L1 distance between
final node embeddings.

Parameters are flattened layer by layer; within a layer the order is
``root``, ``filter.w1``, ``filter.b1``, ``filter.w2``, ``filter.b2``, ``bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .exceptions import DegenerateError, ShapeError, ValidationError
from .optim import Adam
from .params import ParamVector, glorot_init
from .validation import check_fraction, check_multigraphs


@dataclass(frozen=True)
class DgnConfig:
    r: int
    v: int
    layer_dims: tuple = (36, 24, 5)
    filter_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.r < 2 or self.v < 1:
            raise ValidationError(f"need r >= 2 and v >= 1, got r={self.r}, v={self.v}")
        if not self.layer_dims or min(self.layer_dims) < 1 or self.filter_hidden < 1:
            raise ValidationError("need at least one layer and all widths >= 1")

    def manifest(self):
        out = []
        d_in = 1
        for l, d_out in enumerate(self.layer_dims):
            p = f"layer{l}."
            out += [
                (p + "root", (d_out, d_in)),
                (p + "filter.w1", (self.v, self.filter_hidden)),
                (p + "filter.b1", (self.filter_hidden,)),
                (p + "filter.w2", (self.filter_hidden, d_out, d_in)),
                (p + "filter.b2", (d_out, d_in)),
                (p + "bias", (d_out,)),
            ]
            d_in = d_out
        return tuple(out)


PROBE_SCALES = (0.25, 1.0, 4.0)


def init_dgn(cfg, seed=0, *, max_redraws=64):
    """Glorot init, redrawn until it is alive on random probe graphs.

    A ReLU stack can start dead: every node embedding is clipped to the
    same value, the template is identically zero and so is the gradient.
    Draw 0 uses ``default_rng(seed)``; redraw ``a`` uses the key
    ``[*seed, 9, a]``. Liveness is judged on data-free uniform graphs at
    several scales, so the check never needs a site's subjects.
    """
    manifest = cfg.manifest()
    zero = {n for n, _ in manifest if n.endswith("filter.b2")}
    key = [int(s) for s in np.atleast_1d(seed)]
    probe = _probe_graphs(cfg, np.random.default_rng([*key, 10]))
    for attempt in range(max_redraws):
        rng = np.random.default_rng(seed if attempt == 0 else [*key, 9, attempt])
        params = glorot_init(manifest, rng, zero=zero)
        if is_alive(params, probe, cfg):
            return params
    raise DegenerateError(f"no live initialization in {max_redraws} draws")


def _probe_graphs(cfg, rng, n=4):
    up = np.triu(rng.uniform(size=(n, cfg.r, cfg.r, cfg.v)).transpose(0, 3, 1, 2), 1)
    return (up + up.transpose(0, 1, 3, 2)).transpose(0, 2, 3, 1)


def is_alive(params, X, cfg, min_active=0.5):
    """True when, at every probe scale, each template has enough positive off-diagonal entries."""
    off = ~np.eye(cfg.r, dtype=bool)
    for s in PROBE_SCALES:
        c = subject_cbts(params, X * s, cfg)
        if np.min(np.mean(c[:, off] > 0, axis=1)) < min_active:
            return False
    return True


def ceil_count(fraction, n):
    """ceil(fraction * n), immune to float noise such as 0.4 * 10 = 4.000...01."""
    return max(1, math.ceil(round(fraction * n, 9)))


def _check_params(params, cfg):
    if params.manifest != cfg.manifest():
        raise ShapeError("parameter manifest does not match the DGN configuration")


def _check_dims(X, cfg):
    if X.shape[1] != cfg.r or X.shape[3] != cfg.v:
        raise ShapeError(
            f"tensor has R={X.shape[1]}, V={X.shape[3]} but config expects R={cfg.r}, V={cfg.v}"
        )


def leaf_tensors(params, requires_grad=True):
    return {n: ad.Tensor(a, requires_grad) for n, a in params.unflatten().items()}


def collect_grad(params, leaves):
    return params.with_data(np.concatenate([
        np.zeros(int(np.prod(s))) if leaves[n].grad is None else leaves[n].grad.ravel()
        for n, s in params.manifest
    ]))


def embed(P, X, cfg):
    """Final node embeddings (n, R, d_L) as a tape tensor."""
    n, r = X.shape[0], X.shape[1]
    offdiag = (1.0 - np.eye(r))[:, :, None]
    h = ad.Tensor(np.ones((n, r, 1)))
    for l in range(len(cfg.layer_dims)):
        p = f"layer{l}."
        hid = ad.relu(ad.einsum("nijv,vk->nijk", X, P[p + "filter.w1"]) + P[p + "filter.b1"])
        hid = hid * offdiag
        g = ad.einsum("kod,njd->njko", P[p + "filter.w2"], h)
        msg = ad.einsum("nijk,njko->nio", hid, g)
        others = ad.tsum(h, axis=1, keepdims=True) - h
        msg = msg + ad.einsum("od,nid->nio", P[p + "filter.b2"], others)
        root = ad.einsum("od,nid->nio", P[p + "root"], h)
        h = ad.relu(root + msg * (1.0 / (r - 1)) + P[p + "bias"])
    return h


def templates_from_embeddings(Z):
    """C[i, j] = sum_d |Z[i, d] - Z[j, d]| for a tape tensor Z (n, R, d)."""
    n, r, d = Z.shape
    diff = ad.reshape(Z, (n, r, 1, d)) - ad.reshape(Z, (n, 1, r, d))
    return ad.tsum(ad.absolute(diff), axis=3)


def subject_cbts(params, X, cfg):
    """Subject-specific templates, shape (n, R, R)."""
    _check_params(params, cfg)
    X = check_multigraphs(X, check_invariants=False)
    _check_dims(X, cfg)
    P = leaf_tensors(params, requires_grad=False)
    return templates_from_embeddings(embed(P, X, cfg)).data


def dgn_forward(params, x, cfg):
    """Template of a single subject tensor (R, R, V)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected one (R, R, V) tensor, got shape {x.shape}")
    return subject_cbts(params, x[None], cfg)[0]


def global_cbt(params, train, cfg):
    """Element-wise median of the training subjects' templates."""
    X = _tensors(train)
    return np.median(subject_cbts(params, X, cfg), axis=0)


def view_weights(train):
    """lambda_v = mean_v' mu_v' / mu_v with mu_v the mean off-diagonal weight of view v."""
    X = _tensors(train)
    r = X.shape[1]
    mu = X.sum(axis=(0, 1, 2)) / (X.shape[0] * r * (r - 1))
    if np.any(mu <= 0):
        bad = int(np.nonzero(mu <= 0)[0][0])
        raise DegenerateError(f"view {bad} has no positive weights in the training set")
    return mu.mean() / mu


def frobenius(diff, axes=(0, 1)):
    return np.sqrt(np.sum(diff * diff, axis=axes))


def snl_loss(c, sample, lam):
    """(1/|S|) sum_s sum_v lambda_v ||C - X_s^v||_F."""
    S = _tensors(sample)
    c = np.asarray(c, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if c.shape != S.shape[1:3] or lam.shape != (S.shape[3],):
        raise ShapeError("template, sample and view weights disagree in shape")
    d = frobenius(c[None, :, :, None] - S, axes=(1, 2))  # (|S|, V)
    return float((d * lam).sum(axis=1).mean())


def draw_samples(n_batch, n_pool, fraction, rng):
    """One row of ceil(fraction * n_pool) distinct pool indices per batch subject."""
    m = ceil_count(fraction, n_pool)
    return np.stack([rng.choice(n_pool, m, replace=False) for _ in range(n_batch)])


def snl_tape(C, pool, sample_idx, lam):
    """Mean SNL of per-subject templates ``C`` (tape, (n, R, R)) against sampled pool subjects."""
    Xs = pool[sample_idx]  # (n, m, R, R, V)
    n, r = C.shape[0], C.shape[1]
    diff = ad.reshape(C, (n, 1, r, r, 1)) - Xs
    d = ad.sqrt(ad.tsum(ad.square(diff), axis=(2, 3)))  # (n, m, V)
    return ad.mean(ad.tsum(d * lam, axis=2))


def snl_value_and_grad(params, X, sample_idx, lam, cfg):
    leaves = leaf_tensors(params)
    C = templates_from_embeddings(embed(leaves, X, cfg))
    loss = snl_tape(C, X, sample_idx, lam)
    loss.backward()
    return float(loss.data), collect_grad(params, leaves)


def snl_gradient(params, batch, sample_fraction, lam, seed, cfg):
    """Reverse-mode gradient of the batch-mean SNL; samples are drawn from the batch."""
    _check_params(params, cfg)
    check_fraction(sample_fraction, "sample_fraction")
    X = _tensors(batch)
    _check_dims(X, cfg)
    idx = draw_samples(len(X), len(X), sample_fraction, np.random.default_rng(seed))
    return snl_value_and_grad(params, X, idx, np.asarray(lam, dtype=float), cfg)[1]


def train_dgn(params, train, epochs, lr, sample_fraction, seed, cfg, *, lam=None,
              optimizer=None, start_epoch=0, loss_trace=None):
    """Full-batch Adam on the SNL, one update per epoch.

    Epoch ``e`` draws its SNL samples from ``default_rng([seed, start_epoch + e])``.
    Pass an existing ``optimizer`` to keep Adam moments across calls, and a
    list as ``loss_trace`` to record the pre-update loss of every epoch.
    """
    _check_params(params, cfg)
    if epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {epochs}")
    check_fraction(sample_fraction, "sample_fraction")
    X = _tensors(train)
    _check_dims(X, cfg)
    lam = view_weights(X) if lam is None else np.asarray(lam, dtype=float)
    opt = Adam(lr) if optimizer is None else optimizer
    w = params
    for e in range(epochs):
        rng = np.random.default_rng([seed, start_epoch + e])
        idx = draw_samples(len(X), len(X), sample_fraction, rng)
        loss, grad = snl_value_and_grad(w, X, idx, lam, cfg)
        if loss_trace is not None:
            loss_trace.append(loss)
        w = w.with_data(opt.step(w.data, grad.data))
    return w


def _tensors(obj):
    t = getattr(obj, "tensors", obj)
    if isinstance(t, (list, tuple)):
        t = np.stack([np.asarray(x, dtype=np.float64) for x in t])
    t = np.ascontiguousarray(t, dtype=np.float64)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[0] == 0:
        raise ValidationError("expected a nonempty batch of (R, R, V) tensors")
    return t


class DeepGraphNormalizer(TransformerMixin, BaseEstimator):
    """Centralized template learner.

    ``fit`` trains on a batch of multigraphs (n, R, R, V); ``transform``
    maps subjects to their templates; ``template_`` is the median
    training template.
    """

    def __init__(self, layer_dims=(36, 24, 5), filter_hidden=64, n_epochs=100,
                 learning_rate=0.0008, sample_fraction=0.4, random_state=0):
        self.layer_dims = layer_dims
        self.filter_hidden = filter_hidden
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.sample_fraction = sample_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_multigraphs(X)
        self.config_ = DgnConfig(X.shape[1], X.shape[3], self.layer_dims, self.filter_hidden)
        self.view_weights_ = view_weights(X)
        trace = []
        init = init_dgn(self.config_, self.random_state)
        self.params_ = train_dgn(init, X, self.n_epochs, self.learning_rate,
                                 self.sample_fraction, self.random_state, self.config_,
                                 lam=self.view_weights_, loss_trace=trace)
        self.loss_curve_ = trace
        self.template_ = global_cbt(self.params_, X, self.config_)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return subject_cbts(self.params_, check_multigraphs(X), self.config_)

    def score(self, X, y=None):
        """Negative centeredness of ``template_`` on ``X`` (higher is better)."""
        from .evaluation import centeredness

        check_is_fitted(self, "template_")
        return -centeredness(self.template_, check_multigraphs(X))
