"""Survival models: random-intercept logistic GLMM and marginal logistic GLM.

Both expose the per-individual survival probabilities

    p^a_ij = expit(D_ij(a)' beta + b_i)

used by the weighting estimators, with b_i the cluster's posterior mode for the
conditional model and 0 for the marginal one.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import CrtDataset, DesignSpec, ModelFrame, model_frame
from .errors import ConfigError, FitError, RankError, SeparationError
from .quadrature import DEFAULT_ORDER, GhRule, gh_nodes, tilted_quadrature

__all__ = [
    "FitOptions",
    "FittedSurvivalModel",
    "GlmmTerms",
    "glmm_terms",
    "loglik_glmm",
    "score_glmm",
    "logistic_loglik",
    "logistic_score",
    "fit_glm",
    "fit_glmm",
    "fit_survival",
    "predict_survival",
    "ModelSpec",
]

CONDITIONAL = "conditional"
MARGINAL = "marginal"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings shared by both model kinds.

    ``tol`` bounds the max-abs score (in the (beta, sigma2_b) scale) at
    convergence of the GLMM; the GLM is always driven to 1e-10.
    """

    max_iter: int = 200
    tol: float = 1e-7
    quad_order: int = DEFAULT_ORDER
    boundary_threshold: float = 1e-6
    separation_bound: float = 50.0

    def __post_init__(self):
        if not (isinstance(self.max_iter, (int, np.integer)) and self.max_iter >= 1):
            raise ConfigError(f"max_iter must be a positive integer, got {self.max_iter!r}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol!r}")
        gh_nodes(self.quad_order)  # validates the order


@dataclass(frozen=True)
class FittedSurvivalModel:
    """A fitted survival model.

    Attributes
    ----------
    kind : {"conditional", "marginal"}
    beta : ndarray, shape (p,)
    sigma2_b : float
        Random-intercept variance; 0 for the marginal kind and at the boundary.
    cluster_modes : ndarray of shape (n_c, 2) or None
        Posterior mode b_i and curvature -d^2 log g_i at the mode, per
        cluster.  Present iff ``kind == "conditional"`` and ``sigma2_b > 0``.
    boundary : bool
        True when the GLMM variance collapsed below the boundary threshold and
        the model was refit as a GLM.  Such a model still counts the variance
        parameter for degrees-of-freedom purposes.
    """

    kind: str
    beta: np.ndarray
    sigma2_b: float
    cluster_modes: Optional[np.ndarray]
    loglik: float
    converged: bool
    boundary: bool
    spec: DesignSpec = DesignSpec()
    columns: tuple = ()
    quad_order: int = DEFAULT_ORDER
    iterations: int = 0
    trace: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (CONDITIONAL, MARGINAL):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.sigma2_b < 0:
            raise ConfigError("sigma2_b must be non-negative")
        if self.boundary and self.sigma2_b != 0:
            raise ConfigError("a boundary fit must have sigma2_b == 0")
        has_modes = self.cluster_modes is not None
        if has_modes != (self.kind == CONDITIONAL and self.sigma2_b > 0):
            raise ConfigError("cluster_modes must be present iff the model is a GLMM with sigma2_b > 0")

    @property
    def p(self):
        return len(self.beta)

    @property
    def modes(self):
        """Per-cluster plug-in random effects (zeros when there are none)."""
        return None if self.cluster_modes is None else self.cluster_modes[:, 0]

    @property
    def uses_random_effect(self):
        return self.cluster_modes is not None

    @property
    def df_params(self):
        """Parameter count for the small-sample factor: p+3 conditional, p+2 marginal."""
        return self.p + (3 if self.kind == CONDITIONAL else 2)

    def with_modes(self, modes, curvatures):
        """Copy with replaced posterior modes (used for a new dataset)."""
        cm = np.column_stack([modes, curvatures])
        return FittedSurvivalModel(
            self.kind, self.beta, self.sigma2_b, cm, self.loglik, self.converged,
            self.boundary, self.spec, self.columns, self.quad_order, self.iterations, self.trace,
        )


def _as_frame(data: Union[CrtDataset, ModelFrame], spec: DesignSpec) -> ModelFrame:
    if isinstance(data, ModelFrame):
        return data
    return model_frame(data, spec)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Marginal logistic model
# ---------------------------------------------------------------------------


def logistic_loglik(data, beta, spec: DesignSpec = DesignSpec()) -> float:
    """Bernoulli log-likelihood sum_ij [S eta - log(1 + exp(eta))]."""
    f = _as_frame(data, spec)
    eta = f.X @ np.asarray(beta, dtype=float)
    return float(np.sum(f.s * eta - np.logaddexp(0.0, eta)))


def logistic_score(data, beta, spec: DesignSpec = DesignSpec(), per_cluster=False):
    """sum_j D_ij (S_ij - expit(D_ij' beta)), summed or per cluster."""
    f = _as_frame(data, spec)
    r = f.X * (f.s - _expit(f.X @ np.asarray(beta, dtype=float)))[:, None]
    return np.add.reduceat(r, f.starts, axis=0) if per_cluster else r.sum(axis=0)


def _check_separation_input(f: ModelFrame):
    if np.all(f.s == 1) or np.all(f.s == 0):
        state = "survive" if f.s[0] == 1 else "die"
        raise SeparationError(f"all individuals {state}: the survival model has no finite MLE")
    if np.linalg.matrix_rank(f.X) < f.p:
        raise RankError(f"design matrix is rank deficient (p={f.p}, columns {f.columns})")


def _irls(f: ModelFrame, opts: FitOptions, beta0=None, tol=1e-10):
    beta = np.zeros(f.p) if beta0 is None else np.array(beta0, dtype=float)
    ll = logistic_loglik(f, beta)
    trace = []
    for it in range(1, opts.max_iter + 1):
        p = _expit(f.X @ beta)
        score = f.X.T @ (f.s - p)
        gmax = float(np.max(np.abs(score)))
        trace.append((it, ll, gmax))
        if gmax <= tol:
            return beta, ll, it, trace
        info = (f.X * (p * (1.0 - p))[:, None]).T @ f.X
        try:
            cf = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise RankError("singular weighted cross-product X'WX in the logistic fit") from None
        if np.linalg.cond(info) > 1e14:
            raise RankError("singular weighted cross-product X'WX in the logistic fit")
        step = np.linalg.solve(cf.T, np.linalg.solve(cf, score))
        a = 1.0
        for _ in range(40):
            cand = beta + a * step
            ll_c = logistic_loglik(f, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            a *= 0.5
        beta, ll = cand, ll_c
        if np.max(np.abs(beta)) > opts.separation_bound:
            raise SeparationError(
                f"|beta| exceeded {opts.separation_bound}: complete or quasi-complete separation", trace)
    raise FitError(f"logistic fit did not converge in {opts.max_iter} iterations", trace)


def fit_glm(data, spec: DesignSpec = DesignSpec(), opts: FitOptions = FitOptions(),
            init=None) -> FittedSurvivalModel:
    """Logistic regression MLE by iteratively reweighted least squares."""
    f = _as_frame(data, spec)
    _check_separation_input(f)
    beta, ll, it, trace = _irls(f, opts, None if init is None else init.beta)
    beta.setflags(write=False)
    return FittedSurvivalModel(MARGINAL, beta, 0.0, None, ll, True, False, f.spec,
                               f.columns, opts.quad_order, it, trace)


# ---------------------------------------------------------------------------
# GLMM marginal likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlmmTerms:
    """Per-cluster likelihood pieces at one (beta, sigma2_b).

    ``score`` has one row per cluster: the beta block then the sigma2_b entry.
    ``hessian`` (if requested) is the total second derivative in the same
    coordinates.  ``e2``..``e7`` are tilted expectations (integral k over
    integral 1).
    """

    loglik: np.ndarray
    score: np.ndarray
    modes: np.ndarray
    curvatures: np.ndarray
    hessian: Optional[np.ndarray] = None
    e2: Optional[np.ndarray] = None
    e3: Optional[np.ndarray] = None
    e4: Optional[np.ndarray] = None
    e5: Optional[np.ndarray] = None


def glmm_terms(f: ModelFrame, beta, sigma2_b, rule: GhRule, init_modes=None,
               hessian=False) -> GlmmTerms:
    beta = np.asarray(beta, dtype=float)
    s2 = float(sigma2_b)
    eta = f.X @ beta
    tq = tilted_quadrature(eta, f.s, f.starts, f.sizes, s2, rule, init=init_modes)
    s_eta = np.add.reduceat(f.s * eta, f.starts)
    ll = -0.5 * (LOG_2PI + np.log(s2)) + s_eta + tq.log_i1
    sD = np.add.reduceat(f.s[:, None] * f.X, f.starts, axis=0)
    pi_t2 = tq.pi * tq.t * tq.t
    e2 = pi_t2.sum(axis=1)
    c1 = np.sum(tq.pi[tq.cluster_index] * tq.p, axis=1)
    e4 = np.add.reduceat(c1[:, None] * f.X, f.starts, axis=0)
    score = np.column_stack([sD - e4, -0.5 / s2 + e2 / (2.0 * s2 * s2)])
    curv = (tq.scales ** -2)
    if not hessian:
        return GlmmTerms(ll, score, tq.modes, curv, e2=e2, e4=e4)
    e3 = np.sum(pi_t2 * tq.t * tq.t, axis=1)
    v = np.add.reduceat(tq.p[:, :, None] * f.X[:, None, :], f.starts, axis=0)
    e5 = np.einsum("iq,iqa->ia", pi_t2, v)
    c2 = np.sum(tq.pi[tq.cluster_index] * tq.p * (1.0 - tq.p), axis=1)
    e6_tot = (f.X * c2[:, None]).T @ f.X
    e7_tot = np.einsum("iq,iqa,iqb->ab", tq.pi, v, v)
    p = f.p
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = -e6_tot + e7_tot - e4.T @ e4
    hb = -np.sum(e5 - e4 * e2[:, None], axis=0) / (2.0 * s2 * s2)
    H[:p, p] = hb
    H[p, :p] = hb
    n_c = f.n_clusters
    H[p, p] = (n_c / (2.0 * s2 ** 2) - e2.sum() / s2 ** 3
               + np.sum(e3 - e2 * e2) / (4.0 * s2 ** 4))
    return GlmmTerms(ll, score, tq.modes, curv, H, e2, e3, e4, e5)


def _rule(rule):
    if rule is None:
        return gh_nodes(DEFAULT_ORDER)
    if isinstance(rule, GhRule):
        return rule
    return gh_nodes(rule)


def loglik_glmm(data, beta, sigma2_b, rule=None, spec: DesignSpec = DesignSpec()) -> float:
    """Marginal log-likelihood of the random-intercept logistic model.

    Includes the Gaussian normalizing constant -1/2 log(2 pi sigma2_b) per
    cluster, so that it tends to the plain logistic log-likelihood as
    sigma2_b -> 0.
    """
    if not sigma2_b > 0:
        raise ConfigError(f"sigma2_b must be positive, got {sigma2_b!r}")
    f = _as_frame(data, spec)
    return float(glmm_terms(f, beta, sigma2_b, _rule(rule)).loglik.sum())


def score_glmm(data, beta, sigma2_b, rule=None, spec: DesignSpec = DesignSpec(),
               per_cluster=False) -> np.ndarray:
    """Analytic score in (beta, sigma2_b), length p+1 (or per cluster)."""
    if not sigma2_b > 0:
        raise ConfigError(f"sigma2_b must be positive, got {sigma2_b!r}")
    f = _as_frame(data, spec)
    sc = glmm_terms(f, beta, sigma2_b, _rule(rule)).score
    return sc if per_cluster else sc.sum(axis=0)


def _initial_sigma2(f: ModelFrame):
    s_sum = np.add.reduceat(f.s, f.starts)
    rate = (s_sum + 0.5) / (f.sizes + 1.0)
    return max(0.05, 0.5 * float(np.var(np.log(rate / (1.0 - rate)))))


def _modified_newton_direction(g, H):
    """Ascent direction solving (-H~) d = g with -H~ made positive definite."""
    w, V = np.linalg.eigh(-0.5 * (H + H.T))
    floor = max(1e-8 * np.max(np.abs(w)), 1e-12)
    w = np.maximum(np.abs(w), floor)
    return V @ ((V.T @ g) / w)


def fit_glmm(data, spec: DesignSpec = DesignSpec(), rule=None, opts: FitOptions = FitOptions(),
             init: Optional[FittedSurvivalModel] = None) -> FittedSurvivalModel:
    """Maximum likelihood for the random-intercept logistic model.

    Damped Newton ascent with the analytic (Louis-identity) Hessian, on
    (beta, eta) with sigma2_b = exp(2 eta).  If sigma2_b drops below
    ``opts.boundary_threshold`` the model is refit as a GLM and returned with
    ``boundary=True``.

    Parameters
    ----------
    init : FittedSurvivalModel, optional
        Warm start (e.g. the full-data fit when refitting bootstrap samples).
    """
    f = _as_frame(data, spec)
    rule = _rule(rule) if rule is not None else gh_nodes(opts.quad_order)
    _check_separation_input(f)
    p = f.p
    if init is not None and init.sigma2_b > 0:
        beta = np.array(init.beta, dtype=float)
        s2 = float(init.sigma2_b)
    else:
        beta = np.array(_irls(f, opts)[0] if init is None else init.beta, dtype=float)
        s2 = _initial_sigma2(f)
    x = np.append(beta, 0.5 * np.log(s2))

    def evaluate(x, modes=None, hess=False):
        return glmm_terms(f, x[:p], np.exp(2.0 * x[p]), rule, init_modes=modes, hessian=hess)

    terms = evaluate(x, hess=True)
    ll = float(terms.loglik.sum())
    trace = []
    boundary = False
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        s2 = np.exp(2.0 * x[p])
        g_nat = terms.score.sum(axis=0)
        gmax = float(np.max(np.abs(g_nat)))
        trace.append((it, ll, gmax, s2))
        if gmax <= opts.tol:
            converged = True
            break
        if s2 < opts.boundary_threshold:
            boundary = True
            break
        g = g_nat.copy()
        g[p] = 2.0 * s2 * g_nat[p]
        H = terms.hessian.copy()
        H[:p, p] *= 2.0 * s2
        H[p, :p] *= 2.0 * s2
        H[p, p] = 4.0 * s2 * s2 * terms.hessian[p, p] + 4.0 * s2 * g_nat[p]
        d = _modified_newton_direction(g, H)
        big = max(abs(d[p]) / 2.0, np.max(np.abs(d[:p])) / 5.0)
        if big > 1.0:
            d /= big
        slope = float(g @ d)
        a = 1.0
        accepted = None
        # Near the optimum the likelihood change drops below roundoff, so the
        # Armijo test is meaningless; fall through to the score-decrease test.
        n_search = 0 if slope <= 1e-11 * (1.0 + abs(ll)) else 40
        for _ in range(n_search):
            cand = x + a * d
            t_c = evaluate(cand, terms.modes, hess=True)
            ll_c = float(t_c.loglik.sum())
            if ll_c >= ll + 1e-4 * a * slope:
                accepted = (cand, t_c, ll_c)
                break
            a *= 0.5
        if accepted is None:
            # Roundoff floor: accept the full step if it reduces the score.
            t_c = evaluate(x + d, terms.modes, hess=True)
            if np.max(np.abs(t_c.score.sum(axis=0))) < gmax:
                accepted = (x + d, t_c, float(t_c.loglik.sum()))
            elif gmax <= 100 * opts.tol:
                converged = True
                break
            else:
                raise FitError(f"GLMM line search failed at iteration {it} (max |score| {gmax:.3g})", trace)
        x, terms, ll = accepted
        if np.max(np.abs(x[:p])) > opts.separation_bound:
            raise SeparationError(
                f"|beta| exceeded {opts.separation_bound}: complete or quasi-complete separation", trace)
    else:
        raise FitError(f"GLMM fit did not converge in {opts.max_iter} iterations", trace)

    if boundary:
        glm = fit_glm(f, opts=opts)
        return FittedSurvivalModel(CONDITIONAL, glm.beta, 0.0, None, glm.loglik, True, True,
                                   f.spec, f.columns, rule.order, it, trace)
    beta = x[:p].copy()
    beta.setflags(write=False)
    cm = np.column_stack([terms.modes, terms.curvatures])
    cm.setflags(write=False)
    return FittedSurvivalModel(CONDITIONAL, beta, float(np.exp(2.0 * x[p])), cm, ll, converged,
                               False, f.spec, f.columns, rule.order, it, trace)


def fit_survival(data, model="glmm", spec: DesignSpec = DesignSpec(),
                 opts: FitOptions = FitOptions(), init=None) -> FittedSurvivalModel:
    """Dispatch on ``model`` in {"glmm", "conditional", "glm", "marginal"}."""
    if model in ("glmm", CONDITIONAL):
        return fit_glmm(data, spec, opts=opts, init=init)
    if model in ("glm", MARGINAL):
        return fit_glm(data, spec, opts=opts, init=init)
    raise ConfigError(f"unknown survival model {model!r} (expected glmm or glm)")


def predict_survival(model: FittedSurvivalModel, data, a, spec: Optional[DesignSpec] = None):
    """p^a_ij = expit(D_ij(a)' beta + b_i) for every individual.

    ``b_i`` is the stored posterior mode (conditional kind) or 0.
    """
    if a not in (0, 1):
        raise ConfigError(f"a must be 0 or 1, got {a!r}")
    f = _as_frame(data, spec or model.spec)
    if f.p != model.p:
        raise ConfigError(f"design has {f.p} columns but the model has {model.p} coefficients")
    X = f.X1 if a == 1 else f.X0
    eta = X @ model.beta
    if model.uses_random_effect:
        if len(model.modes) != f.n_clusters:
            raise ConfigError("model posterior modes do not match the number of clusters")
        eta = eta + model.modes[f.cluster_index]
    return _expit(eta)


@dataclass(frozen=True)
class ModelSpec:
    """What to fit: model kind, design and optimizer options (picklable)."""

    model: str = "glmm"
    spec: DesignSpec = DesignSpec()
    opts: FitOptions = FitOptions()

    def __post_init__(self):
        if self.model not in ("glmm", "glm", CONDITIONAL, MARGINAL):
            raise ConfigError(f"unknown survival model {self.model!r} (expected glmm or glm)")

    @property
    def kind(self):
        return CONDITIONAL if self.model in ("glmm", CONDITIONAL) else MARGINAL

    def fit(self, data, init=None) -> FittedSurvivalModel:
        return fit_survival(data, self.model, self.spec, self.opts, init=init)
