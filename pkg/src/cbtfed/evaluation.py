"""Template quality metrics: centeredness, topology KL, one-shot SVM and paired t-test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .exceptions import DegenerateError, ShapeError, ValidationError
from .validation import check_template, upper_triangle

MEASURES = ("pagerank", "effective_size")


@dataclass(frozen=True)
class TopologyDistribution:
    p: np.ndarray
    measure: str


def frobenius_distance(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


def centeredness(c, test):
    """Mean over subjects of the mean over views of ||C - X_s^v||_F."""
    C = check_template(c)
    X = np.asarray(getattr(test, "tensors", test), dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.size == 0 or X.shape[0] == 0:
        raise ValidationError("centeredness needs a nonempty test set")
    if X.shape[1:3] != C.shape:
        raise ShapeError(f"template {C.shape} does not match subjects {X.shape[1:3]}")
    diff = C[None, :, :, None] - X
    d = np.sqrt(np.sum(diff * diff, axis=(1, 2)))  # (n, V)
    return float(d.mean(axis=1).mean())


def _check_graph(c):
    C = check_template(c)
    if not np.any(C > 0):
        raise DegenerateError("graph has no positive edge")
    return C


def pagerank_distribution(c, damping=0.85, tol=1e-10, max_iter=10_000):
    """Weighted PageRank by power iteration; zero-weight columns teleport uniformly."""
    W = _check_graph(c)
    n = W.shape[0]
    M = transition_matrix(W)
    p = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = (1 - damping) / n + damping * (M @ p)
        done = np.abs(nxt - p).sum() < tol
        p = nxt
        if done:
            break
    return TopologyDistribution(p / p.sum(), "pagerank")


def transition_matrix(W):
    """Column-stochastic matrix: column j is W[:, j] scaled by its sum."""
    n = W.shape[0]
    col = W.sum(axis=0)
    M = np.where(col > 0, W / np.where(col > 0, col, 1.0), 1.0 / n)
    return M


def effective_sizes(c):
    """Burt's effective size n_i - 2 t_i / n_i on the graph thresholded at the mean positive weight."""
    W = _check_graph(c)
    thr = W[W > 0].mean()
    A = (W >= thr).astype(float)
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    ties = np.diag(A @ A @ A) / 2.0  # edges among each node's neighbours
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(deg > 0, deg - 2.0 * ties / deg, 0.0)
    return e


def effective_size_distribution(c):
    e = effective_sizes(c)
    if e.sum() <= 0:
        raise DegenerateError("every node is isolated after thresholding")
    return TopologyDistribution(e / e.sum(), "effective_size")


def topology_distribution(c, measure):
    if measure == "pagerank":
        return pagerank_distribution(c)
    if measure == "effective_size":
        return effective_size_distribution(c)
    raise ValidationError(f"unknown topology measure {measure!r}; choose from {MEASURES}")


def ground_truth_distribution(test, measure):
    """Average of the per-subject, per-view distributions, renormalized."""
    X = np.asarray(getattr(test, "tensors", test), dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.shape[0] == 0:
        raise ValidationError("ground truth needs a nonempty test set")
    acc = np.zeros(X.shape[1])
    for s in range(X.shape[0]):
        for v in range(X.shape[3]):
            try:
                acc += topology_distribution(X[s, :, :, v], measure).p
            except DegenerateError as exc:
                raise DegenerateError(f"subject {s} view {v}: {exc}") from exc
    return TopologyDistribution(acc / acc.sum(), measure)


def kl_divergence(p, q, floor=1e-12):
    """Natural-log KL(p || q); both inputs are floored at ``floor`` and renormalized."""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    q = np.asarray(getattr(q, "p", q), dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch {p.shape} vs {q.shape}")
    p = np.maximum(p, floor)
    q = np.maximum(q, floor)
    p, q = p / p.sum(), q / q.sum()
    return float(max(np.sum(p * (np.log(p) - np.log(q))), 0.0))


def one_shot_svm(c_a, c_b, test_a, test_b):
    """Two-template hard-margin SVM; class A is the positive class.

    With one training point per class the maximum-margin separator is the
    perpendicular bisector, so a test template is labelled by whichever
    training template is nearer (ties go to A).
    """
    fa = upper_triangle(check_template(c_a, "c_a"))
    fb = upper_triangle(check_template(c_b, "c_b"))
    if fa.shape != fb.shape:
        raise ShapeError("class templates differ in size")
    if np.array_equal(fa, fb):
        raise DegenerateError("class templates are identical; the margin is zero")
    feats, truth = [], []
    for group, label in ((test_a, True), (test_b, False)):
        for t in group:
            f = upper_triangle(check_template(t, "test template"))
            if f.shape != fa.shape:
                raise ShapeError("test template size differs from class templates")
            feats.append(f)
            truth.append(label)
    if not feats:
        raise ValidationError("no test templates given")
    pred = predict_one_shot(fa, fb, np.stack(feats))
    return classification_scores(np.array(truth), pred)


def predict_one_shot(fa, fb, feats):
    """Sign of the bisector decision function w.x + b, w = fa - fb."""
    w = fa - fb
    b = -0.5 * (fa @ fa - fb @ fb)
    return feats @ w + b >= 0


def classification_scores(truth, pred):
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    acc = float(np.mean(truth == pred))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"acc": acc, "prec": prec, "rec": rec, "f1": f1}


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) via the regularized incomplete beta."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(a, b):
    """Two-tailed paired t-test; returns ``(t, p)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValidationError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateError("all paired differences are identical")
    t = d.mean() / (sd / np.sqrt(n))
    return float(t), student_t_sf2(t, n - 1)


def significance_stars(p):
    """'*' per threshold passed among 0.05, 0.01, 0.001, 0.0001."""
    return "*" * sum(p < th for th in (0.05, 0.01, 0.001, 0.0001))
