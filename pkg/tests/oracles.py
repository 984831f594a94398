"""Independent reference computations used as test oracles.

Nothing here shares code with the library numerics: integrals use a dense
trapezoid rule, derivatives use central differences, maximizers use grids.
"""

import numpy as np

TRAP_LO, TRAP_HI, TRAP_STEP = -12.0, 12.0, 1e-4


def trapezoid_grid(lo=TRAP_LO, hi=TRAP_HI, step=TRAP_STEP):
    n = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


def trapezoid(values, grid):
    """Trapezoid rule along the last axis of ``values``."""
    h = grid[1] - grid[0]
    return h * (values.sum(axis=-1) - 0.5 * (values[..., 0] + values[..., -1]))


def kernel_on_grid(X, s, beta, sigma2, grid):
    """g(b) on ``grid`` for one cluster plus the per-individual expit matrix."""
    eta = X @ beta
    lin = eta[:, None] + grid[None, :]
    log_g = (s[:, None] * grid[None, :] - np.logaddexp(0.0, lin)).sum(axis=0) - grid ** 2 / (2 * sigma2)
    p = 1.0 / (1.0 + np.exp(-lin))
    return np.exp(log_g), p


def trapezoid_weights(grid):
    h = grid[1] - grid[0]
    w = np.full(len(grid), h)
    w[0] = w[-1] = h / 2
    return w


def seven_integrals_trapezoid(X, s, beta, sigma2, grid=None):
    """The seven kernel integrals of one cluster by the trapezoid rule.

    Uses that D_ij does not depend on b, so e.g. int g sum_j D_j p_j =
    sum_j D_j int g p_j.
    """
    grid = trapezoid_grid() if grid is None else grid
    g, p = kernel_on_grid(X, s, beta, sigma2, grid)
    gw = g * trapezoid_weights(grid)
    b2 = grid ** 2
    i1 = gw.sum()
    i2 = gw @ b2
    i3 = gw @ (b2 * b2)
    i4 = X.T @ (p @ gw)
    i5 = X.T @ (p @ (gw * b2))
    i6 = (X * (p * (1 - p) @ gw)[:, None]).T @ X
    pp = (p * gw) @ p.T                 # int g p_j p_k
    i7 = X.T @ pp @ X
    return i1, i2, i3, i4, i5, i6, i7


def fd_gradient(fun, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = step
        out[k] = (fun(x + e) - fun(x - e)) / (2 * step)
    return out


def fd_jacobian(fun, x, rel_step=1e-5):
    """Central-difference Jacobian of a vector function, step rel_step (1 + |x_k|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    J = np.empty((len(f0), len(x)))
    for k in range(len(x)):
        h = rel_step * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h)
    return J


def grid_argmax(fun, lo, hi, step):
    grid = np.arange(lo, hi + step / 2, step)
    vals = fun(grid)
    k = int(np.argmax(vals))
    return grid[k], vals[k]


def independence_gee_sandwich(X, s, beta, cluster_starts):
    """Hand-rolled logistic GEE sandwich with independence working correlation.

    Returns A^-1 (sum_i U_i U_i') A^-1 with A = sum_ij x x' p(1-p) and
    U_i = sum_j x_ij (s_ij - p_ij).
    """
    ends = list(cluster_starts[1:]) + [len(s)]
    A = np.zeros((X.shape[1], X.shape[1]))
    meat = np.zeros_like(A)
    for a, b in zip(cluster_starts, ends):
        Xi, si = X[a:b], s[a:b]
        pi = 1.0 / (1.0 + np.exp(-Xi @ beta))
        Di = Xi * (pi * (1 - pi))[:, None]          # dmu/dbeta'
        Vinv = 1.0 / (pi * (1 - pi))                # independence working variance
        A += Di.T @ (Vinv[:, None] * Di)
        Ui = Di.T @ (Vinv * (si - pi))
        meat += np.outer(Ui, Ui)
    Ainv = np.linalg.inv(A)
    return Ainv @ meat @ Ainv
