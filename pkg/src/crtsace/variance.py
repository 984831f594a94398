"""Stacked estimating equations and the cluster-robust sandwich variance.

The parameter theta = (beta, sigma2_b, mu(1), mu(0)) solves
sum_i m_i(theta) = 0, where m_i stacks the survival-model score of cluster i
over the two outcome-mean rows of the chosen estimator.  Then

    V = B^-1 M B^-T,   B = sum_i dm_i/dtheta',   M = sum_i m_i m_i',

and var(tau_hat) = k' V k with k = (0, ..., 0, 1, -1).  Everything uses raw
cluster sums; dividing B and M by n_c (the averaged form) leaves k' V k
unchanged.

In the mean rows the cluster random effect is the plug-in posterior mode b_i
of the fitted model and is held fixed, so those rows do not depend on
sigma2_b.  For the marginal model, and for a conditional fit whose variance
collapsed to the boundary, the survival block is the logistic score.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ModelFrame, model_frame
from .errors import ConfigError, EstimationError, IntegrationError, SingularMatrixError, VarianceError
from .quadrature import GhRule, gh_nodes
from .survival import FittedSurvivalModel, glmm_terms, logistic_score

__all__ = [
    "MAX_CONDITION",
    "ThetaVector",
    "SandwichParts",
    "SandwichResult",
    "theta_from_fit",
    "estimating_functions",
    "m_ssw",
    "m_psw",
    "outer_matrix",
    "sandwich",
    "df_factor",
]

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class ThetaVector:
    """Stacked parameter with its layout.

    ``sigma2_b`` is None when the survival block is the logistic score
    (marginal model or boundary fit); the vector then has p+2 entries,
    otherwise p+3.
    """

    beta: np.ndarray
    sigma2_b: Optional[float]
    mu1: float
    mu0: float

    @property
    def p(self):
        return len(self.beta)

    @property
    def has_sigma(self):
        return self.sigma2_b is not None

    @property
    def layout(self):
        p = self.p
        out = {"beta": slice(0, p)}
        j = p
        if self.has_sigma:
            out["sigma2_b"] = j
            j += 1
        out["mu1"] = j
        out["mu0"] = j + 1
        return out

    @property
    def dim(self):
        return self.p + (3 if self.has_sigma else 2)

    @property
    def k(self):
        """Contrast vector picking mu(1) - mu(0)."""
        k = np.zeros(self.dim)
        k[-2], k[-1] = 1.0, -1.0
        return k

    def to_array(self):
        parts = [np.asarray(self.beta, dtype=float)]
        if self.has_sigma:
            parts.append([self.sigma2_b])
        parts.append([self.mu1, self.mu0])
        return np.concatenate(parts)

    def from_array(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ConfigError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        p = self.p
        s2 = float(x[p]) if self.has_sigma else None
        return ThetaVector(x[:p].copy(), s2, float(x[-2]), float(x[-1]))


def theta_from_fit(model: FittedSurvivalModel, mu1, mu0) -> ThetaVector:
    s2 = model.sigma2_b if model.uses_random_effect else None
    return ThetaVector(np.array(model.beta, dtype=float), s2, float(mu1), float(mu0))


def df_factor(n_c, n_params):
    if n_c <= n_params:
        raise VarianceError(f"degrees-of-freedom correction needs n_c > #params ({n_c} <= {n_params})")
    return n_c / (n_c - n_params)


def _frame(data, model):
    return data if isinstance(data, ModelFrame) else model_frame(data, model.spec)


def _rule(model, rule):
    if rule is None:
        return gh_nodes(model.quad_order)
    return rule if isinstance(rule, GhRule) else gh_nodes(rule)


def _check_estimator(estimator):
    e = str(estimator).upper()
    if e not in ("SSW", "PSW"):
        raise ConfigError(f"unknown estimator {estimator!r}")
    return e


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _plugin(f: ModelFrame, model: FittedSurvivalModel, beta):
    b = model.modes[f.cluster_index] if model.uses_random_effect else 0.0
    return _expit(f.X0 @ beta + b), _expit(f.X1 @ beta + b)


def _mean_rows(f, theta, estimator, p0, p1):
    """Per-individual contributions to the two outcome-mean rows."""
    a, s, y = f.arm, f.s, f.y
    if estimator == "SSW":
        w1 = a * s * p0
        w0 = (1.0 - a) * s * p1
    else:
        ts = a * s
        if np.any(p1[ts > 0] <= 0):
            raise EstimationError("positivity violated: predicted survival under treatment is 0")
        w1 = ts * p0 / np.where(ts > 0, p1, 1.0)
        w0 = (1.0 - a) * s
    return (y - theta.mu1) * w1, (y - theta.mu0) * w0


def estimating_functions(data, theta: ThetaVector, estimator, model: FittedSurvivalModel,
                         rule=None) -> np.ndarray:
    """Per-cluster stacked estimating functions m_i(theta), shape (n_c, dim).

    ``model`` supplies the plug-in posterior modes (held fixed).
    """
    estimator = _check_estimator(estimator)
    f = _frame(data, model)
    beta = np.asarray(theta.beta, dtype=float)
    if theta.has_sigma:
        if not theta.sigma2_b > 0:
            raise ConfigError("sigma2_b must be positive in the conditional estimating equations")
        score = glmm_terms(f, beta, theta.sigma2_b, _rule(model, rule), init_modes=model.modes).score
    else:
        score = logistic_score(f, beta, per_cluster=True)
    p0, p1 = _plugin(f, model, beta)
    r1, r0 = _mean_rows(f, theta, estimator, p0, p1)
    mu = np.column_stack([np.add.reduceat(r1, f.starts), np.add.reduceat(r0, f.starts)])
    return np.hstack([score, mu])


def m_ssw(data, theta: ThetaVector, model: FittedSurvivalModel, rule=None):
    """Per-cluster SSW estimating functions."""
    return estimating_functions(data, theta, "SSW", model, rule)


def m_psw(data, theta: ThetaVector, model: FittedSurvivalModel, rule=None):
    """Per-cluster PSW estimating functions."""
    return estimating_functions(data, theta, "PSW", model, rule)


def outer_matrix(data, theta: ThetaVector, estimator, model: FittedSurvivalModel, rule=None):
    """Analytic B = sum_i dm_i/dtheta'.

    Block pattern (conditional; q = p+1 survival parameters):

        [ H_gamma   0     0  ]
        [ B31  0   B33   0   ]
        [ B41  0    0   B44  ]

    With PSW, B41 is exactly zero.  Zero blocks are left at zero and never
    computed.
    """
    estimator = _check_estimator(estimator)
    f = _frame(data, model)
    beta = np.asarray(theta.beta, dtype=float)
    p = f.p
    d = theta.dim
    B = np.zeros((d, d))
    if theta.has_sigma:
        t = glmm_terms(f, beta, theta.sigma2_b, _rule(model, rule), init_modes=model.modes,
                       hessian=True)
        q = p + 1
        B[:q, :q] = t.hessian
    else:
        q = p
        pm = _expit(f.X @ beta)
        B[:p, :p] = -(f.X * (pm * (1.0 - pm))[:, None]).T @ f.X
    i1, i0 = d - 2, d - 1
    a, s, y = f.arm, f.s, f.y
    p0, p1 = _plugin(f, model, beta)
    if estimator == "SSW":
        w1 = a * s * p0
        w0 = (1.0 - a) * s * p1
        B[i1, :p] = ((y - theta.mu1) * w1 * (1.0 - p0)) @ f.X0
        B[i0, :p] = ((y - theta.mu0) * w0 * (1.0 - p1)) @ f.X1
    else:
        ts = a * s
        if np.any(p1[ts > 0] <= 0):
            raise EstimationError("positivity violated: predicted survival under treatment is 0")
        w1 = ts * p0 / np.where(ts > 0, p1, 1.0)
        w0 = (1.0 - a) * s
        g = (y - theta.mu1) * w1
        B[i1, :p] = (g * (1.0 - p0)) @ f.X0 - (g * (1.0 - p1)) @ f.X1
    B[i1, i1] = -np.sum(w1)
    B[i0, i0] = -np.sum(w0)
    if not np.all(np.isfinite(B)):
        rows, cols = np.nonzero(~np.isfinite(B))
        raise VarianceError(f"non-finite outer-matrix entry at ({rows[0]}, {cols[0]})")
    return B


@dataclass(frozen=True)
class SandwichParts:
    B: np.ndarray
    M: np.ndarray
    V: np.ndarray
    per_cluster_m: np.ndarray


@dataclass(frozen=True)
class SandwichResult:
    """Sandwich pieces plus var(tau_hat).

    ``variance`` already includes ``df_factor`` (1.0 when uncorrected);
    ``raw_variance`` is k' V k.
    """

    parts: SandwichParts
    theta: ThetaVector
    variance: float
    raw_variance: float
    df_factor: float
    condition_number: float
    n_params: int
    diagnostics: dict = field(default_factory=dict)


def sandwich(data, model: FittedSurvivalModel, estimate, df_correct=True, rule=None,
             estimator=None) -> SandwichResult:
    """Cluster-robust sandwich variance of tau_hat.

    Parameters
    ----------
    estimate : SaceEstimate or ThetaVector
        Supplies mu(1), mu(0) (and the estimator name for a SaceEstimate).
    df_correct : bool
        Multiply var(tau_hat) by n_c / (n_c - #params), #params = p+3 for the
        conditional model (boundary fits included) and p+2 for the marginal.

    Raises
    ------
    SingularMatrixError
        If cond(B) exceeds 1e12.
    """
    f = _frame(data, model)
    if isinstance(estimate, ThetaVector):
        theta = estimate
        if estimator is None:
            raise ConfigError("estimator is required when passing a ThetaVector")
    else:
        theta = theta_from_fit(model, estimate.mu1, estimate.mu0)
        estimator = estimator or estimate.estimator
    try:
        m = estimating_functions(f, theta, estimator, model, rule)
        B = outer_matrix(f, theta, estimator, model, rule)
    except IntegrationError as exc:
        raise VarianceError(f"quadrature failed while assembling the sandwich: {exc}") from exc
    M = m.T @ m
    cond = float(np.linalg.cond(B))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError(
            f"outer matrix is singular or ill-conditioned (condition number {cond:.3e} > {MAX_CONDITION:.0e})",
            cond)
    Binv = np.linalg.inv(B)
    V = Binv @ M @ Binv.T
    V = 0.5 * (V + V.T)
    k = theta.k
    a = np.linalg.solve(B.T, k)
    raw = float(a @ M @ a)
    n_params = model.df_params
    factor = df_factor(f.n_clusters, n_params) if df_correct else 1.0
    return SandwichResult(SandwichParts(B, M, V, m), theta, raw * factor, raw, factor, cond, n_params)
