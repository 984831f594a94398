"""Gauss-Hermite rules and adaptive (Liu-Pierce) quadrature.

The scalar API (:func:`find_center`, :func:`adaptive_integrate`) works on any
positive integrand supplied through its logarithm.  The cluster API
(:func:`tilted_quadrature`, :func:`cluster_integrals`) handles the
random-intercept logistic kernel

    g_i(b) = exp( sum_j [S_ij b - log(1 + exp(D_ij'beta + b))] - b^2 / (2 sigma2) )

for all clusters at once: one mode/curvature per cluster, shared by every
integrand that carries g_i as its dominant factor.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import ConfigError, IntegrationError

__all__ = [
    "DEFAULT_ORDER",
    "GhRule",
    "gh_nodes",
    "AdaptiveCenter",
    "find_center",
    "adaptive_integrate",
    "cluster_modes",
    "TiltedQuadrature",
    "tilted_quadrature",
    "IntegralSet",
    "cluster_integrals",
]

DEFAULT_ORDER = 25
MAX_ORDER = 100
SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class GhRule:
    """Physicists' Gauss-Hermite rule: sum_i w_i f(x_i) ~ int f(x) exp(-x^2) dx."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray

    @property
    def log_adaptive_weights(self):
        """log(w_i) + x_i^2, the node factor of the adaptive rule."""
        return self.log_weights + self.nodes ** 2


def _orthonormal_hermite(n, x):
    """h_{n-1}(x), h_n(x) for Hermite polynomials orthonormal under exp(-x^2)."""
    h_prev = np.zeros_like(x)
    h = np.full_like(x, np.pi ** -0.25)
    for k in range(n):
        h_next = np.sqrt(2.0 / (k + 1)) * x * h - np.sqrt(k / (k + 1)) * h_prev
        h_prev, h = h, h_next
    return h_prev, h


@lru_cache(maxsize=None)
def gh_nodes(order: int) -> GhRule:
    """Gauss-Hermite nodes and weights of the given order (1 <= order <= 100).

    Nodes are the roots of H_n, located by the Golub-Welsch eigenvalue problem
    and polished by Newton steps on the three-term recurrence.  Weights follow

        w_i = sqrt(pi) 2^(n-1) (n-1)! / (n H_{n-1}(x_i)^2),

    evaluated with orthonormal polynomials to stay finite at high order.
    """
    if isinstance(order, bool) or not isinstance(order, (int, np.integer)):
        raise ConfigError(f"quadrature order must be an integer, got {order!r}")
    n = int(order)
    if not 1 <= n <= MAX_ORDER:
        raise ConfigError(f"quadrature order must be in [1, {MAX_ORDER}], got {n}")
    if n == 1:
        x = np.zeros(1)
    else:
        off = np.sqrt(np.arange(1, n) / 2.0)
        x = eigh_tridiagonal(np.zeros(n), off, eigvals_only=True)
        for _ in range(2):
            h_nm1, h_n = _orthonormal_hermite(n, x)
            x = x - h_n / (np.sqrt(2.0 * n) * h_nm1)
        x = np.sort(x)
        x = 0.5 * (x - x[::-1])
    h_nm1, _ = _orthonormal_hermite(n, x)
    log_w = -np.log(n) - 2.0 * np.log(np.abs(h_nm1))
    log_w = 0.5 * (log_w + log_w[::-1])
    for a in (x, log_w):
        a.setflags(write=False)
    w = np.exp(log_w)
    w.setflags(write=False)
    return GhRule(n, x, w, log_w)


# ---------------------------------------------------------------------------
# Scalar adaptive quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptiveCenter:
    mode: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise IntegrationError(f"invalid adaptive scale {self.scale!r}")


def _fd_step(t):
    return 1e-5 * (1.0 + abs(t))


def find_center(log_h, bracket, d2_log_h=None) -> AdaptiveCenter:
    """Mode and Laplace scale of a positive integrand ``h = exp(log_h)``.

    The mode is found by bounded Brent search on ``-log_h`` followed by a few
    safeguarded Newton polish steps, to |dt| <= 1e-8.  The scale is
    ``(-d^2 log h / dt^2)^(-1/2)`` at the mode, from ``d2_log_h`` if given,
    else a five-point central difference with step 2e-3 (1 + |mode|).

    Raises
    ------
    IntegrationError
        If no interior maximum is found in ``bracket`` or the curvature at the
        candidate is not negative (integrand not unimodal).
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not hi > lo:
        raise ConfigError(f"bracket must satisfy lo < hi, got {bracket!r}")

    def neg(t):
        v = log_h(t)
        return np.inf if np.isnan(v) else -v

    res = minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10, "maxiter": 1000})
    t = float(res.x)

    def d1(u):
        e = _fd_step(u)
        return (log_h(u + e) - log_h(u - e)) / (2 * e)

    def d2(u):
        if d2_log_h is not None:
            return float(d2_log_h(u))
        # five-point stencil: truncation O(e^4), roundoff O(eps / e^2)
        e = 2e-3 * (1.0 + abs(u))
        f = [log_h(u + k * e) for k in (-2, -1, 0, 1, 2)]
        return (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * e * e)

    for _ in range(3):
        c = d2(t)
        if not c < 0:
            break
        step = -d1(t) / c
        cand = t + step
        if not lo < cand < hi or log_h(cand) < log_h(t) - 1e-12 * abs(log_h(t)):
            break
        t = cand
        if abs(step) <= 1e-12 * (1 + abs(t)):
            break

    width = hi - lo
    if t - lo <= 1e-7 * width or hi - t <= 1e-7 * width:
        raise IntegrationError(
            f"integrand not unimodal: no interior maximum in [{lo}, {hi}] (candidate {t})")
    curv = d2(t)
    if not (np.isfinite(curv) and curv < 0):
        raise IntegrationError(
            f"integrand not unimodal: non-negative log-curvature {curv} at candidate {t}")
    return AdaptiveCenter(t, float((-curv) ** -0.5))


def adaptive_integrate(log_h, rule: GhRule, center: AdaptiveCenter, return_log=False):
    """Liu-Pierce sum  sqrt(2) s * sum_i w_i exp(x_i^2) h(m + sqrt(2) s x_i).

    ``log_h`` is the log of the integrand; terms are combined in log space.
    """
    t = center.mode + SQRT2 * center.scale * rule.nodes
    vals = np.array([float(log_h(ti)) for ti in t])
    bad = np.flatnonzero(np.isnan(vals))
    if bad.size:
        k = int(bad[0])
        raise IntegrationError(f"integrand is NaN at node {k} (t={t[k]!r})")
    terms = np.log(SQRT2 * center.scale) + rule.log_adaptive_weights + vals
    out = logsumexp(terms)
    return float(out) if return_log else float(np.exp(out))


# ---------------------------------------------------------------------------
# Vectorized cluster kernel
# ---------------------------------------------------------------------------


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cluster_modes(eta, s_sum, starts, sizes, sigma2, init=None, tol=1e-10, max_iter=100):
    """Per-cluster mode of log g_i and the curvature -d^2 log g_i at the mode.

    ``eta`` is the fixed-effect linear predictor per individual.  log g_i is
    strictly concave, so a bracketed Newton iteration is used for every
    cluster simultaneously.  The initial bracket is +-8 sqrt(sigma2); an end
    with the wrong derivative sign is replaced by +-n_i sigma2, which always
    brackets the mode.
    """
    n_c = len(starts)
    cl = np.repeat(np.arange(n_c), sizes)
    inv_s2 = 1.0 / sigma2

    def derivs(b):
        p = _expit(eta + b[cl])
        sp = np.add.reduceat(p, starts)
        w = np.add.reduceat(p * (1.0 - p), starts)
        return s_sum - sp - b * inv_s2, w + inv_s2

    sd = np.sqrt(sigma2)
    lo = np.full(n_c, -8.0 * sd)
    hi = np.full(n_c, 8.0 * sd)
    g_lo, _ = derivs(lo)
    g_hi, _ = derivs(hi)
    lo = np.where(g_lo > 0, lo, -sizes * sigma2)
    hi = np.where(g_hi < 0, hi, sizes * sigma2)
    b = np.zeros(n_c) if init is None else np.asarray(init, dtype=float).copy()
    b = np.clip(b, lo, hi)
    for _ in range(max_iter):
        g, c = derivs(b)
        if not np.all(np.isfinite(g)):
            raise IntegrationError("non-finite derivative while locating cluster modes")
        lo = np.where(g > 0, b, lo)
        hi = np.where(g <= 0, b, hi)
        newton = g / c
        if np.all(np.abs(newton) <= tol * (1.0 + np.abs(b))):
            b = b + newton
            break
        cand = b + newton
        out = (cand < lo) | (cand > hi)
        cand = np.where(out, 0.5 * (lo + hi), cand)
        step = np.abs(cand - b)
        b = cand
    else:
        worst = int(np.argmax(step))
        raise IntegrationError("integrand not unimodal: mode search did not converge",
                               cluster=worst)
    _, c = derivs(b)
    return b, c


@dataclass(frozen=True)
class TiltedQuadrature:
    """Adaptive nodes for every cluster kernel g_i at one (beta, sigma2).

    ``pi[i]`` are normalized weights: sum_q pi[i, q] f(t[i, q]) approximates
    the tilted expectation int g_i f / int g_i.  ``p[r, q]`` is
    expit(eta_r + t[cluster(r), q]).
    """

    modes: np.ndarray
    scales: np.ndarray
    t: np.ndarray
    pi: np.ndarray
    log_i1: np.ndarray
    p: np.ndarray
    cluster_index: np.ndarray
    starts: np.ndarray


def tilted_quadrature(eta, s, starts, sizes, sigma2, rule: GhRule, init=None) -> TiltedQuadrature:
    if not sigma2 > 0:
        raise ConfigError(f"random-intercept variance must be positive, got {sigma2!r}")
    starts = np.asarray(starts)
    sizes = np.asarray(sizes)
    s_sum = np.add.reduceat(s, starts)
    modes, curv = cluster_modes(eta, s_sum, starts, sizes, sigma2, init=init)
    scales = curv ** -0.5
    t = modes[:, None] + SQRT2 * scales[:, None] * rule.nodes[None, :]
    cl = np.repeat(np.arange(len(starts)), sizes)
    lin = eta[:, None] + t[cl]
    sp = np.logaddexp(0.0, lin)
    log_g = s_sum[:, None] * t - np.add.reduceat(sp, starts, axis=0) - t * t / (2.0 * sigma2)
    log_terms = np.log(SQRT2 * scales)[:, None] + rule.log_adaptive_weights[None, :] + log_g
    if np.isnan(log_terms).any():
        i, q = np.argwhere(np.isnan(log_terms))[0]
        raise IntegrationError(f"integrand is NaN at node {q}", cluster=int(i))
    log_i1 = logsumexp(log_terms, axis=1)
    pi = np.exp(log_terms - log_i1[:, None])
    p = np.exp(lin - sp)
    return TiltedQuadrature(modes, scales, t, pi, log_i1, p, cl, starts)


@dataclass(frozen=True)
class IntegralSet:
    """The seven kernel integrals, per cluster (leading axis = cluster).

    i1 = int g,  i2 = int g b^2,  i3 = int g b^4,
    i4 = int g sum_j D_j p_j,  i5 = int g b^2 sum_j D_j p_j,
    i6 = int g sum_j D_j D_j' p_j (1 - p_j),
    i7 = int g (sum_j D_j p_j)(sum_j D_j p_j)'
    with p_j = expit(D_j'beta + b).
    """

    modes: np.ndarray
    scales: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    i3: np.ndarray
    i4: np.ndarray
    i5: np.ndarray
    i6: np.ndarray
    i7: np.ndarray
    log_i1: np.ndarray

    def ratio(self, k):
        """Tilted expectation: integral k divided by integral 1."""
        v = getattr(self, f"i{k}")
        return v / self.i1.reshape((-1,) + (1,) * (v.ndim - 1))


def tilted_moments(tq: TiltedQuadrature, X):
    """Tilted expectations (normalized by int g) for all seven forms."""
    pi, t, p = tq.pi, tq.t, tq.p
    t2 = t * t
    e2 = np.sum(pi * t2, axis=1)
    e3 = np.sum(pi * t2 * t2, axis=1)
    v = np.add.reduceat(p[:, :, None] * X[:, None, :], tq.starts, axis=0)
    e4 = np.einsum("iq,iqa->ia", pi, v)
    e5 = np.einsum("iq,iqa->ia", pi * t2, v)
    c2 = np.sum(pi[tq.cluster_index] * p * (1.0 - p), axis=1)
    e6 = np.add.reduceat(c2[:, None, None] * X[:, :, None] * X[:, None, :], tq.starts, axis=0)
    e7 = np.einsum("iq,iqa,iqb->iab", pi, v, v)
    return e2, e3, e4, e5, e6, e7


def cluster_integrals(X, s, starts, sizes, beta, sigma2_b, rule: GhRule = None) -> IntegralSet:
    """All seven kernel integrals for every cluster, sharing one center per cluster."""
    rule = rule or gh_nodes(DEFAULT_ORDER)
    X = np.asarray(X, dtype=float)
    s = np.asarray(s, dtype=float)
    eta = X @ np.asarray(beta, dtype=float)
    tq = tilted_quadrature(eta, s, starts, sizes, float(sigma2_b), rule)
    e2, e3, e4, e5, e6, e7 = tilted_moments(tq, X)
    i1 = np.exp(tq.log_i1)
    return IntegralSet(
        tq.modes, tq.scales, i1,
        i1 * e2, i1 * e3, i1[:, None] * e4, i1[:, None] * e5,
        i1[:, None, None] * e6, i1[:, None, None] * e7, tq.log_i1,
    )
