"""Supervised metadata regressor: weight residuals -> noise (mu, sigma).

Corpus construction per site: sample metadata, synthesize a meta-domain
with the pretrained generator, train a DGN on it and a reference DGN on
the local data, and pair the averaged weights with the sampled metadata.
The MLP reads the residual ``w_avg - w_o`` rescaled to unit RMS, so
residuals from budgets of different length land on a common scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .dgn import collect_grad, init_dgn, leaf_tensors, train_dgn, view_weights
from .exceptions import ShapeError, ValidationError
from .generator import Metadata
from .optim import Adam
from .params import ParamVector, glorot_init


@dataclass(frozen=True)
class CorpusEntry:
    w_avg: ParamVector
    w_o: ParamVector
    target: Metadata

    def __post_init__(self):
        self.w_avg.check_compatible(self.w_o)

    @property
    def residual(self):
        return self.w_avg.data - self.w_o.data


@dataclass(frozen=True)
class SamplingRanges:
    mu: tuple
    sigma: tuple

    def draw(self, rng):
        return Metadata(rng.uniform(*self.mu), rng.uniform(*self.sigma))


def default_sampling_ranges(location, dispersion=None):
    """mu in [-0.3 a, 0.3 a] and sigma in [0, 0.5 b].

    ``a`` is a location scale (mean template weight) and ``b`` a dispersion
    scale (spread of template weights); ``b`` defaults to ``a``.
    """
    b = location if dispersion is None else dispersion
    if location < 0 or b < 0:
        raise ValidationError("sampling scales must be nonnegative")
    return SamplingRanges((-0.3 * location, 0.3 * location), (0.0, 0.5 * b))


def build_regressor_corpus(local, generator, dgn_cfg, m_count=32, sampling_ranges=None, seed=0,
                           *, init_params=None, epochs=40, lr=0.0008, sample_fraction=0.4,
                           metadata=None):
    """Corpus of ``((w_avg, w_o), m)`` pairs for one site.

    ``generator`` is a fitted :class:`~cbtfed.generator.ConnectivityGenerator`.
    All DGNs start from ``init_params`` (default: a seeded fresh init) and
    train for ``epochs`` full-batch Adam steps. ``metadata`` overrides the
    random draws with an explicit list.
    """
    if m_count < 1:
        raise ValidationError(f"m_count must be >= 1, got {m_count}")
    X = np.asarray(getattr(local, "tensors", local), dtype=np.float64)
    ranges = sampling_ranges or default_sampling_ranges(generator.scale_, generator.dispersion_)
    w0 = init_dgn(dgn_cfg, seed) if init_params is None else init_params
    w_o = train_dgn(w0, X, epochs, lr, sample_fraction, seed, dgn_cfg)
    rng = np.random.default_rng([seed, 2])
    draws = list(metadata) if metadata is not None else [ranges.draw(rng) for _ in range(m_count)]
    entries = []
    for i, m in enumerate(draws):
        domain = generator.generate(m, random_state=[seed, 3, i])
        lam = view_weights(X)
        w_m = train_dgn(w0, domain.subjects, epochs, lr, sample_fraction, seed, dgn_cfg, lam=lam)
        w_avg = w_m.with_data(0.5 * (w_m.data + w_o.data))
        entries.append(CorpusEntry(w_avg, w_o, m))
    return entries


def regressor_manifest(n_inputs, hidden=(256, 64)):
    dims = (n_inputs, *hidden)
    out = []
    for i in range(len(hidden)):
        out += [(f"fc{i}.w", (dims[i], dims[i + 1])), (f"fc{i}.b", (dims[i + 1],))]
    out += [("out.w", (dims[-1], 2)), ("out.b", (2,)),
            ("calib.shift", (2,)), ("calib.scale", (2,))]
    return tuple(out)


# output calibration is fitted from the corpus, never by gradient descent
FROZEN = ("calib.shift", "calib.scale")


def init_regressor(n_inputs, hidden=(256, 64), seed=0):
    """Glorot hidden layers, zero head, identity calibration."""
    return glorot_init(regressor_manifest(n_inputs, hidden), np.random.default_rng([seed, 4]),
                       zero={"out.w"}, ones={"calib.scale"})


def calibrate(params, targets):
    """Set the frozen output affine so a zero head predicts the corpus mean.

    mu = shift_0 + scale_0 * raw_0 and sigma = softplus(shift_1 + scale_1 * raw_1);
    the sigma scale linearizes softplus at the shift.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    mu_mean, mu_sd = y[:, 0].mean(), y[:, 0].std()
    s_mean = max(y[:, 1].mean(), 1e-12)
    s_sd = y[:, 1].std()
    shift_sigma = s_mean + np.log(-np.expm1(-s_mean))  # inverse softplus
    slope = 1.0 / (1.0 + np.exp(-shift_sigma))
    arrays = params.unflatten()
    arrays["calib.shift"][:] = (mu_mean, shift_sigma)
    arrays["calib.scale"][:] = (mu_sd if mu_sd > 0 else 1.0,
                                (s_sd if s_sd > 0 else s_mean) / slope)
    return params


def normalize_residual(r):
    """Rescale each row to unit RMS; all-zero rows stay zero."""
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    if not np.all(np.isfinite(r)):
        raise ValidationError("residual contains non-finite values")
    rms = np.sqrt(np.mean(r * r, axis=1, keepdims=True))
    return np.divide(r, rms, out=np.zeros_like(r), where=rms > 0)


def _n_hidden(params):
    return sum(1 for n, _ in params.manifest if n.startswith("fc") and n.endswith(".w"))


def _mlp(P, x, n_hidden):
    h = ad.as_tensor(x)
    for i in range(n_hidden):
        h = ad.relu(ad.einsum("bi,io->bo", h, P[f"fc{i}.w"]) + P[f"fc{i}.b"])
    raw = ad.einsum("bi,io->bo", h, P["out.w"]) + P["out.b"]
    raw = raw * P["calib.scale"] + P["calib.shift"]
    return raw[:, 0], ad.softplus(raw[:, 1])


def regressor_outputs(params, residuals):
    """(mu, sigma) arrays for a batch of raw residual vectors."""
    x = normalize_residual(residuals)
    n_in = params.manifest[0][1][0]
    if x.shape[1] != n_in:
        raise ShapeError(f"residual has {x.shape[1]} entries, regressor expects {n_in}")
    mu, sigma = _mlp(leaf_tensors(params, requires_grad=False), x, _n_hidden(params))
    return mu.data, sigma.data


def predict_metadata(params, w_local, w_global):
    """Metadata estimated from the residual ``w_global - w_local``."""
    w_local.check_compatible(w_global)
    mu, sigma = regressor_outputs(params, w_global.data - w_local.data)
    return Metadata(mu[0], sigma[0])


def regression_value_and_grad(params, x, y):
    P = leaf_tensors(params)
    mu, sigma = _mlp(P, x, _n_hidden(params))
    loss = 0.5 * (ad.mean(ad.square(mu - y[:, 0])) + ad.mean(ad.square(sigma - y[:, 1])))
    loss.backward()
    return float(loss.data), collect_grad(params, P)


def train_regressor(corpus, epochs=40, lr=0.0005, seed=0, *, hidden=(256, 64), init=None,
                    loss_trace=None):
    """Full-batch Adam on the joint mean squared error of (mu, sigma)."""
    if not corpus:
        raise ValidationError("cannot train a regressor on an empty corpus")
    x = np.stack([e.residual for e in corpus])
    y = np.array([[e.target.mu, e.target.sigma] for e in corpus])
    return fit_regressor(x, y, epochs, lr, seed, hidden=hidden, init=init, loss_trace=loss_trace)


def fit_regressor(residuals, targets, epochs=40, lr=0.0005, seed=0, *, hidden=(256, 64),
                  init=None, loss_trace=None):
    x = normalize_residual(residuals)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("residuals and targets differ in length")
    if init is None:
        params = calibrate(init_regressor(x.shape[1], hidden, seed), y)
    else:
        params = init
    frozen = np.zeros(len(params), dtype=bool)
    offset = 0
    for name, shape in params.manifest:
        size = int(np.prod(shape))
        frozen[offset:offset + size] = name in FROZEN
        offset += size
    opt = Adam(lr)
    for _ in range(epochs):
        loss, grad = regression_value_and_grad(params, x, y)
        if loss_trace is not None:
            loss_trace.append(loss)
        params = params.with_data(np.where(frozen, params.data, opt.step(params.data, grad.data)))
    return params


class MetadataRegressor(RegressorMixin, BaseEstimator):
    """MLP from raw weight residuals (n, P) to metadata targets (n, 2) = (mu, sigma)."""

    def __init__(self, hidden=(256, 64), n_epochs=40, learning_rate=0.0005, random_state=0):
        self.hidden = hidden
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        trace = []
        self.params_ = fit_regressor(X, y, self.n_epochs, self.learning_rate, self.random_state,
                                     hidden=tuple(self.hidden), loss_trace=trace)
        self.loss_curve_ = trace
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        mu, sigma = regressor_outputs(self.params_, X)
        return np.column_stack([mu, sigma])
