import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pkg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")


def random_multigraphs(n, r, v, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    up = np.triu(rng.uniform(0.05, 1.0, size=(n, v, r, r)) * scale, 1)
    return np.moveaxis(up + up.transpose(0, 1, 3, 2), 1, 3)


def fd_check(f, x, grad, coords, h=1e-5):
    """Max relative error of analytic ``grad`` vs central differences of ``f`` at ``coords``."""
    worst = 0.0
    for i in coords:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        denom = max(abs(num), abs(grad[i]), 1e-6)  # roundoff floor for exact-zero entries
        worst = max(worst, abs(num - grad[i]) / denom)
    return worst


@pytest.fixture
def graphs():
    return random_multigraphs


def smooth_coords(f, x, rng, count=20, h=1e-5, tol=2e-4):
    """Draw ``count`` coordinates where ``f`` is differentiable at the scale of ``h``.

    A coordinate is skipped when its forward and backward one-sided slopes
    disagree by more than ``tol`` relative, i.e. a ReLU or max-pool switch
    lies within ``h``. Returns the chosen coordinates and the number skipped.
    """
    f0 = f(x)
    chosen, skipped = [], 0
    for i in rng.permutation(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fwd, bwd = (f(xp) - f0) / h, (f0 - f(xm)) / h
        if abs(fwd - bwd) > tol * max(abs(fwd), abs(bwd), 1e-6):
            skipped += 1
            continue
        chosen.append(int(i))
        if len(chosen) == count:
            break
    return np.array(chosen), skipped


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Store one acceptance verdict for the end-of-session summary, then assert it."""
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
