"""Input validation helpers shared by the estimators and functional API."""

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_multigraphs(X, *, copy=False, check_invariants=True, name="X"):
    """Coerce ``X`` to a float64 array of shape (n_subjects, R, R, V).

    A single subject of shape (R, R, V) is promoted to a batch of one.
    With ``check_invariants`` every view must be exactly symmetric, have a
    zero diagonal and be nonnegative.
    """
    X = np.array(X, dtype=np.float64, copy=copy)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"{name} must have shape (n, R, R, V), got {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError(f"{name} holds no subjects")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains non-finite values")
    if check_invariants:
        bad = invariant_violation(X)
        if bad:
            raise ValidationError(f"{name}: {bad}")
    return X


def invariant_violation(X):
    """Describe the first multigraph invariant broken by ``X`` (n, R, R, V), or ''."""
    asym = np.nonzero(np.any(X != X.transpose(0, 2, 1, 3), axis=(1, 2)))
    if asym[0].size:
        return f"subject {asym[0][0]} view {asym[1][0]} is not symmetric"
    r = X.shape[1]
    diag = X[:, np.arange(r), np.arange(r), :]
    nz = np.nonzero(np.any(diag != 0, axis=1))
    if nz[0].size:
        return f"subject {nz[0][0]} view {nz[1][0]} has a nonzero diagonal"
    neg = np.nonzero(np.any(X < 0, axis=(1, 2)))
    if neg[0].size:
        return f"subject {neg[0][0]} view {neg[1][0]} has negative entries"
    return ""


def check_template(C, name="C"):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"{name} must be a square matrix, got shape {C.shape}")
    return C


def upper_triangle(M, k=1):
    """Vectorize the strict upper triangle of the trailing two axes."""
    r = M.shape[-1]
    iu = np.triu_indices(r, k=k)
    return M[..., iu[0], iu[1]]


def check_fraction(value, name, *, allow_zero=False):
    lo_ok = value >= 0 if allow_zero else value > 0
    if not (lo_ok and value <= 1):
        bound = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValidationError(f"{name} must lie in {bound}, got {value}")
    return float(value)
