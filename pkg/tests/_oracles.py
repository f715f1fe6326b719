"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle is written from first
principles with plain numpy so it can disagree with the implementation.
"""

import numpy as np

# two crossing bridges on the line: -1 -> 1 and 1 -> -1, equal weight
TWO_PAIR_SOURCES = np.array([[-1.0], [1.0]])
TWO_PAIR_TARGETS = np.array([[1.0], [-1.0]])
TWO_PAIR_COUPLING = np.array([[0.5, 0.0], [0.0, 0.5]])
TWO_PAIR_SIGMA = 0.5


def _two_pair_fields(x, t, sigma0=TWO_PAIR_SIGMA):
    a = np.array([-1.0, 1.0])
    b = np.array([1.0, -1.0])
    m = (1 - t) * a + t * b
    s = sigma0 * np.sqrt(t * (1 - t))
    c = (1 - 2 * t) / (2 * t * (1 - t))
    logp = -0.5 * ((x[:, None] - m) / s) ** 2 - np.log(s * np.sqrt(2 * np.pi)) + np.log(0.5)
    top = logp.max(axis=1, keepdims=True)
    w = np.exp(logp - top)
    p = w.sum(axis=1) * np.exp(top[:, 0])
    w /= w.sum(axis=1, keepdims=True)
    v = (b - a) + c * (x[:, None] - m)
    return p, (w * v).sum(axis=1), c


def two_pair_rate(t, lo=-4.0, hi=4.0, points=4001):
    """|E[c(t)] - E[d vbar/dx]| by trapezoid quadrature on a uniform grid.

    The marginal field is the exact posterior average of the two bridge
    fields; its derivative comes from central differences on the grid.
    """
    x = np.linspace(lo, hi, points)
    p, vbar, c = _two_pair_fields(x, t)
    dv = np.gradient(vbar, x)
    mass = np.trapezoid(p, x)
    return abs(np.trapezoid(p * (c - dv), x) / mass)


def gaussian_entropy_rate(t, d, sigma0):
    """d/dt of d/2 log(2 pi e sigma0^2 t (1 - t))."""
    return d * (1 - 2 * t) / (2 * t * (1 - t))


def rbf_mmd2_bruteforce(x, y, h):
    """Unbiased squared MMD by explicit double loops over index pairs."""
    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2 * h * h))

    n, m = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    syy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return sxx + syy - 2 * sxy


def dtw_bruteforce(a, b):
    """DTW by enumerating every monotone path (tiny inputs only)."""
    best = [np.inf]

    def walk(i, j, acc):
        acc += abs(a[i] - b[j])
        if acc >= best[0]:
            return
        if i == len(a) - 1 and j == len(b) - 1:
            best[0] = acc
            return
        if i + 1 < len(a) and j + 1 < len(b):
            walk(i + 1, j + 1, acc)
        if i + 1 < len(a):
            walk(i + 1, j, acc)
        if j + 1 < len(b):
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def sinkhorn_reference(a, b, eps, iters=20000):
    """Plain (non-log) Sinkhorn for well-conditioned small problems."""
    C = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    K = np.exp(-C / eps)
    mu = np.full(len(a), 1 / len(a))
    nu = np.full(len(b), 1 / len(b))
    u = np.ones(len(a))
    for _ in range(iters):
        v = nu / (K.T @ u)
        u = mu / (K @ v)
    return u[:, None] * K * v[None, :]
