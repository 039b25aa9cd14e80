"""Metadata-driven connectivity generator.

A DGN compresses each subject into a template; a U-Net decoder (RDGN)
maps a template, optionally perturbed with symmetric Gaussian noise
parameterized by :class:`Metadata`, back to a V-view multigraph. The two
networks are pretrained jointly on a mixture of the SNL and a per-view
Frobenius reconstruction loss.

U-Net layout for depth ``D`` and base width ``c``: encoder level ``l``
is a basic unit to ``c * 2**l`` channels followed by 2x2 max pooling; the
bottleneck unit widens to ``c * 2**D``; each decoder level upsamples with a
2x2 stride-2 transposed convolution, concatenates the skip and applies a
basic unit. A basic unit is (3x3 conv, ReLU, instance norm) twice. A 1x1
head emits V channels, and a learned per-view gain adds the input matrix
to each channel so constant input offsets survive the normalizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .dgn import (
    DgnConfig, collect_grad, draw_samples, embed, global_cbt, init_dgn, leaf_tensors,
    snl_tape, subject_cbts, templates_from_embeddings, view_weights,
)
from .exceptions import DegenerateError, ShapeError, ValidationError
from .optim import Adam
from .params import ParamVector, glorot_init
from .validation import check_multigraphs, upper_triangle


@dataclass(frozen=True)
class Metadata:
    """Mean and standard deviation of the template perturbation noise."""

    mu: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma", float(self.sigma))
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)):
            raise ValidationError(f"metadata must be finite, got {self}")
        if self.sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class RdgnConfig:
    r: int
    v: int
    depth: int = 2
    base_channels: int = 16

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValidationError("depth and base_channels must be >= 1")
        if self.r < 2 or self.v < 1:
            raise ValidationError(f"need r >= 2 and v >= 1, got r={self.r}, v={self.v}")

    @property
    def padded(self):
        step = 2 ** self.depth
        return -(-self.r // step) * step

    def manifest(self):
        c = self.base_channels
        out = []

        def unit(prefix, cin, cout):
            out.extend([
                (prefix + "conv1.w", (cout, cin, 3, 3)), (prefix + "conv1.b", (cout,)),
                (prefix + "norm1.g", (cout,)), (prefix + "norm1.b", (cout,)),
                (prefix + "conv2.w", (cout, cout, 3, 3)), (prefix + "conv2.b", (cout,)),
                (prefix + "norm2.g", (cout,)), (prefix + "norm2.b", (cout,)),
            ])

        cin = 1
        for l in range(self.depth):
            unit(f"enc{l}.", cin, c * 2 ** l)
            cin = c * 2 ** l
        unit("mid.", cin, c * 2 ** self.depth)
        for l in reversed(range(self.depth)):
            out.extend([(f"dec{l}.up.w", (c * 2 ** (l + 1), c * 2 ** l, 2, 2)),
                        (f"dec{l}.up.b", (c * 2 ** l,))])
            unit(f"dec{l}.", c * 2 ** (l + 1), c * 2 ** l)
        out.extend([("head.w", (self.v, c)), ("head.b", (self.v,)), ("bypass", (self.v,))])
        return tuple(out)


@dataclass
class MetaDomain:
    subjects: np.ndarray
    source_metadata: Metadata
    round: int = 0

    def __len__(self):
        return self.subjects.shape[0]


def init_rdgn(cfg, seed=0):
    manifest = cfg.manifest()
    ones = {n for n, _ in manifest if ".norm" in n and n.endswith(".g")} | {"bypass"}
    return glorot_init(manifest, np.random.default_rng([seed, 1]), ones=ones)


def sample_noise(m, r, seed):
    """Symmetric R x R matrix with N(mu, sigma^2) off-diagonal entries and a zero diagonal."""
    if not isinstance(m, Metadata):
        m = Metadata(*m)
    if r < 2:
        raise ValidationError(f"noise matrix needs r >= 2, got {r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    iu = np.triu_indices(r, k=1)
    out = np.zeros((r, r))
    out[iu] = rng.normal(m.mu, m.sigma, size=iu[0].size)
    return out + out.T


def _unit(P, prefix, x):
    for i in (1, 2):
        x = ad.conv2d_same(x, P[f"{prefix}conv{i}.w"], P[f"{prefix}conv{i}.b"])
        x = ad.relu(x)
        x = ad.instance_norm(x, P[f"{prefix}norm{i}.g"], P[f"{prefix}norm{i}.b"])
    return x


def rdgn_tape(P, C, cfg):
    """Decode templates (tape tensor, (n, R, R)) into multigraphs (n, R, R, V)."""
    n, r = C.shape[0], C.shape[1]
    if r != cfg.r:
        raise ShapeError(f"template size {r} does not match config r={cfg.r}")
    extra = cfg.padded - r
    x = ad.reshape(ad.pad(C, ((0, 0), (0, extra), (0, extra))), (n, 1, cfg.padded, cfg.padded))
    inp = x
    skips = []
    for l in range(cfg.depth):
        x = _unit(P, f"enc{l}.", x)
        skips.append(x)
        x = ad.max_pool2(x)
    x = _unit(P, "mid.", x)
    for l in reversed(range(cfg.depth)):
        x = ad.conv_transpose2(x, P[f"dec{l}.up.w"], P[f"dec{l}.up.b"])
        x = ad.concat([skips[l], x], axis=1)
        x = _unit(P, f"dec{l}.", x)
    y = ad.conv1x1(x, P["head.w"], P["head.b"])
    y = y + ad.reshape(P["bypass"], (1, -1, 1, 1)) * inp
    y = y[:, :, :r, :r]
    y = (y + ad.transpose(y, (0, 1, 3, 2))) * 0.5
    y = ad.relu(y * (1.0 - np.eye(r)))
    return ad.transpose(y, (0, 2, 3, 1))


def _check_rdgn(params, cfg):
    if params.manifest != cfg.manifest():
        raise ShapeError("parameter manifest does not match the RDGN configuration")


def rdgn_forward(params, inp, cfg):
    """Decode one R x R matrix, or a batch (n, R, R), into V-view multigraphs."""
    _check_rdgn(params, cfg)
    inp = np.asarray(inp, dtype=np.float64)
    single = inp.ndim == 2
    batch = inp[None] if single else inp
    if batch.ndim != 3 or batch.shape[1] != batch.shape[2]:
        raise ShapeError(f"expected (R, R) or (n, R, R) input, got {inp.shape}")
    if batch.shape[1] not in (cfg.r, cfg.padded):
        raise ShapeError(f"input size {batch.shape[1]} does not match config r={cfg.r}")
    batch = batch[:, :cfg.r, :cfg.r]
    out = rdgn_tape(leaf_tensors(params, requires_grad=False), ad.Tensor(batch), cfg).data
    return out[0] if single else out


def reconstruction_loss(x_hat, x):
    """Mean over subjects of (1/V) sum_v ||X_hat^v - X^v||_F."""
    x_hat, x = np.asarray(x_hat, dtype=float), np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ShapeError("reconstruction and target differ in shape")
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    d = x_hat - x
    return float(np.sqrt(np.sum(d * d, axis=(1, 2))).mean())


def mixture_value_and_grad(dgn_params, rdgn_params, X, sample_idx, lam, dgn_cfg, rdgn_cfg,
                           alpha=1.0):
    """SNL of the subject templates plus alpha times their mean reconstruction error."""
    Pd = leaf_tensors(dgn_params)
    Pr = leaf_tensors(rdgn_params)
    C = templates_from_embeddings(embed(Pd, X, dgn_cfg))
    snl = snl_tape(C, X, sample_idx, lam)
    Xh = rdgn_tape(Pr, C, rdgn_cfg)
    rec = ad.mean(ad.sqrt(ad.tsum(ad.square(Xh - X), axis=(1, 2))))
    loss = snl + rec * alpha
    loss.backward()
    return float(loss.data), collect_grad(dgn_params, Pd), collect_grad(rdgn_params, Pr)


def pretrain_generator(train, dgn_cfg, rdgn_cfg, epochs, lr, seed, *, alpha=1.0,
                       sample_fraction=0.4, loss_trace=None, init=None):
    """Jointly train DGN and RDGN end to end with zero noise; returns both parameter sets."""
    X = check_multigraphs(getattr(train, "tensors", train))
    if epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {epochs}")
    lam = view_weights(X)
    wd, wr = init if init is not None else (init_dgn(dgn_cfg, seed), init_rdgn(rdgn_cfg, seed))
    opt_d, opt_r = Adam(lr), Adam(lr)
    for e in range(epochs):
        rng = np.random.default_rng([seed, e])
        idx = draw_samples(len(X), len(X), sample_fraction, rng)
        loss, gd, gr = mixture_value_and_grad(wd, wr, X, idx, lam, dgn_cfg, rdgn_cfg, alpha)
        if loss_trace is not None:
            loss_trace.append(loss)
        wd = wd.with_data(opt_d.step(wd.data, gd.data))
        wr = wr.with_data(opt_r.step(wr.data, gr.data))
    return wd, wr


def templates_alive(cbts, min_active=0.5):
    """True when every template has at least ``min_active`` positive off-diagonal entries."""
    cbts = np.asarray(cbts)
    off = ~np.eye(cbts.shape[-1], dtype=bool)
    return bool(np.min(np.mean(cbts[:, off] > 0, axis=1)) >= min_active)


def generate_meta_domain(m, cbts, rdgn_params, cfg, seed, round_index=0):
    """X_n = RDGN(C_n + N_n) with a fresh noise draw N_n ~ m for every template."""
    if not isinstance(m, Metadata):
        m = Metadata(*m)
    cbts = np.asarray(cbts, dtype=np.float64)
    if cbts.ndim == 2:
        cbts = cbts[None]
    if cbts.shape[0] == 0:
        raise ValidationError("need at least one template to generate from")
    noisy = np.stack([
        c + sample_noise(m, cfg.r, np.random.default_rng([seed, n]))
        for n, c in enumerate(cbts)
    ])
    return MetaDomain(rdgn_forward(rdgn_params, noisy, cfg), m, round_index)


class ConnectivityGenerator(BaseEstimator):
    """Local generator: pretrain on one site's multigraphs, then emit meta-domains.

    After ``fit``, ``cbts_`` holds the fixed subject templates used as
    generation seeds. A pretraining run whose DGN died (templates mostly
    zero) is restarted from the key ``[*random_state, 11, a]``; ``restarts_``
    counts the restarts. ``scale_`` and ``dispersion_`` are the mean and the
    standard deviation of the median template's off-diagonal weights; they
    size the metadata sampling ranges for mu and sigma respectively.
    """

    def __init__(self, layer_dims=(36, 24, 5), filter_hidden=64, depth=2, base_channels=16,
                 n_epochs=100, learning_rate=0.0008, sample_fraction=0.4, alpha=1.0,
                 random_state=0, max_restarts=4):
        self.layer_dims = layer_dims
        self.filter_hidden = filter_hidden
        self.depth = depth
        self.base_channels = base_channels
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.sample_fraction = sample_fraction
        self.alpha = alpha
        self.random_state = random_state
        self.max_restarts = max_restarts

    def fit(self, X, y=None):
        X = check_multigraphs(X)
        r, v = X.shape[1], X.shape[3]
        self.dgn_config_ = DgnConfig(r, v, self.layer_dims, self.filter_hidden)
        self.rdgn_config_ = RdgnConfig(r, v, self.depth, self.base_channels)
        key = [int(s) for s in np.atleast_1d(self.random_state)]
        for attempt in range(self.max_restarts + 1):
            seed = self.random_state if attempt == 0 else [*key, 11, attempt]
            trace = []
            wd, wr = pretrain_generator(
                X, self.dgn_config_, self.rdgn_config_, self.n_epochs, self.learning_rate,
                seed, alpha=self.alpha, sample_fraction=self.sample_fraction, loss_trace=trace)
            cbts = subject_cbts(wd, X, self.dgn_config_)
            if templates_alive(cbts):
                break
        else:
            raise DegenerateError(
                f"generator templates collapsed to zero in {self.max_restarts + 1} pretraining attempts")
        self.dgn_params_, self.rdgn_params_ = wd, wr
        self.restarts_ = attempt
        self.loss_curve_ = trace
        self.cbts_ = cbts
        off = upper_triangle(np.median(self.cbts_, axis=0))
        self.scale_ = float(np.mean(off))
        self.dispersion_ = float(np.std(off))
        return self

    def generate(self, metadata, random_state=0, round_index=0, size=None):
        """Meta-domain from the first ``size`` stored templates (default: all)."""
        check_is_fitted(self, "rdgn_params_")
        cbts = self.cbts_ if size is None else self.cbts_[:size]
        if size == 0:
            return MetaDomain(np.zeros((0, *self.cbts_.shape[1:], self.rdgn_config_.v)),
                              Metadata(*metadata) if not isinstance(metadata, Metadata) else metadata,
                              round_index)
        return generate_meta_domain(metadata, cbts, self.rdgn_params_, self.rdgn_config_,
                                    random_state, round_index)

    def reconstruct(self, X):
        check_is_fitted(self, "rdgn_params_")
        c = subject_cbts(self.dgn_params_, check_multigraphs(X), self.dgn_config_)
        return rdgn_forward(self.rdgn_params_, c, self.rdgn_config_)
