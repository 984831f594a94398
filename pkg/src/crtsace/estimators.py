"""Weighting estimators of the survivor average causal effect.

With p^a_ij the predicted survival probability under arm a,

SSW:  mu(1) = sum Y A S p^0 / sum A S p^0,
      mu(0) = sum Y (1-A) S p^1 / sum (1-A) S p^1;
PSW:  mu(1) = sum Y A S (p^0/p^1) / sum A S (p^0/p^1),
      mu(0) = sum Y (1-A) S / sum (1-A) S;

and tau = mu(1) - mu(0).  Sums run over every individual of every cluster;
non-survivors drop out through the S factor.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CrtDataset, ModelFrame, model_frame, require_valid
from .errors import ConfigError, EstimationError
from .survival import FittedSurvivalModel, ModelSpec, predict_survival

__all__ = [
    "Z975",
    "SaceEstimate",
    "SurvivalWeights",
    "survival_weights",
    "estimate_ssw",
    "estimate_psw",
    "VarianceConfig",
    "estimate",
    "estimate_all",
]

Z975 = 1.959963984540054
ESTIMATORS = ("SSW", "PSW")


@dataclass(frozen=True)
class SaceEstimate:
    """A SACE point estimate with optional variance.

    ``tau`` is stored as computed (``mu1 - mu0``), never recomputed.
    ``ci95`` is present exactly when ``variance`` is; for the sandwich it is
    ``tau +- 1.959964 sqrt(variance)``, for the bootstrap it is the
    percentile interval.
    """

    tau: float
    mu1: float
    mu0: float
    estimator: str
    model_kind: str
    variance: Optional[float] = None
    ci95: Optional[tuple] = None
    variance_method: Optional[str] = None
    df_corrected: bool = False
    df_factor: Optional[float] = None
    condition_number: Optional[float] = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if (self.variance is None) != (self.ci95 is None):
            raise ConfigError("ci95 must be present iff variance is present")
        if self.variance is not None and self.variance < 0:
            raise ConfigError("variance must be non-negative")

    @property
    def se(self):
        return None if self.variance is None else float(np.sqrt(self.variance))

    def to_dict(self):
        return {
            "estimator": self.estimator,
            "model_kind": self.model_kind,
            "tau": self.tau,
            "mu1": self.mu1,
            "mu0": self.mu0,
            "variance": self.variance,
            "se": self.se,
            "ci95": None if self.ci95 is None else list(self.ci95),
            "variance_method": self.variance_method,
            "df_corrected": self.df_corrected,
            "df_factor": self.df_factor,
            "condition_number": self.condition_number,
            "diagnostics": dict(self.diagnostics),
        }


@dataclass(frozen=True)
class SurvivalWeights:
    """Predicted survival under each arm, per individual."""

    p0: np.ndarray
    p1: np.ndarray


def _frame(data, model: FittedSurvivalModel) -> ModelFrame:
    return data if isinstance(data, ModelFrame) else model_frame(data, model.spec)


def survival_weights(data, model: FittedSurvivalModel) -> SurvivalWeights:
    f = _frame(data, model)
    return SurvivalWeights(predict_survival(model, f, 0), predict_survival(model, f, 1))


def _ratio(num_w, y, arm_name):
    den = float(np.sum(num_w))
    if not den > 0:
        raise EstimationError(f"zero weight sum in the {arm_name} arm: no observed survivors")
    return float(np.sum(num_w * y)) / den


def _ssw_means(f: ModelFrame, w: SurvivalWeights):
    a, s = f.arm, f.s
    mu1 = _ratio(a * s * w.p0, f.y, "treated")
    mu0 = _ratio((1.0 - a) * s * w.p1, f.y, "control")
    return mu1, mu0


def _psw_means(f: ModelFrame, w: SurvivalWeights):
    a, s = f.arm, f.s
    treated_surv = (a * s) > 0
    if np.any(w.p1[treated_surv] <= 0):
        raise EstimationError("positivity violated: predicted survival under treatment is 0 "
                              "for an observed treated survivor")
    ratio = np.where(treated_surv, w.p0 / np.where(treated_surv, w.p1, 1.0), 0.0)
    mu1 = _ratio(a * s * ratio, f.y, "treated")
    control = ((1.0 - a) * s) > 0
    if not control.any():
        raise EstimationError("zero weight sum in the control arm: no observed survivors")
    mu0 = float(np.mean(f.y[control]))
    return mu1, mu0


def _point(f, model, which, w=None):
    w = w or survival_weights(f, model)
    mu1, mu0 = (_ssw_means if which == "SSW" else _psw_means)(f, w)
    return SaceEstimate(mu1 - mu0, mu1, mu0, which, model.kind)


def estimate_ssw(data, model: FittedSurvivalModel) -> SaceEstimate:
    """Survival-score weighting point estimate (no variance)."""
    return _point(_frame(data, model), model, "SSW")


def estimate_psw(data, model: FittedSurvivalModel) -> SaceEstimate:
    """Principal-score weighting point estimate (no variance)."""
    return _point(_frame(data, model), model, "PSW")


@dataclass(frozen=True)
class VarianceConfig:
    """How to attach a variance: "sandwich", "bootstrap" or "none"."""

    method: str = "sandwich"
    df_correct: bool = True
    bootstrap: Optional[object] = None  # resampling.BootstrapConfig

    def __post_init__(self):
        if self.method not in ("sandwich", "bootstrap", "none"):
            raise ConfigError(f"variance method must be sandwich, bootstrap or none, got {self.method!r}")


def _which(which):
    if isinstance(which, str):
        w = which.upper()
        if w == "BOTH":
            return ESTIMATORS
        which = (w,)
    which = tuple(str(x).upper() for x in which)
    for x in which:
        if x not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {x!r} (expected SSW, PSW or both)")
    return which


def estimate(data: CrtDataset, model: FittedSurvivalModel, which="both",
             variance_cfg: VarianceConfig = VarianceConfig(), model_spec: Optional[ModelSpec] = None,
             timing: Optional[dict] = None):
    """Point estimates and (optionally) variances for the requested estimators.

    ``model_spec`` describes how ``model`` was fitted; the bootstrap needs it
    to refit resamples (defaults to the model's own kind, design and default
    options).
    """
    from .resampling import BootstrapConfig, cluster_bootstrap
    from .variance import sandwich

    which = _which(which)
    f = _frame(data, model)
    w = survival_weights(f, model)
    points = [_point(f, model, e, w) for e in which]
    if variance_cfg.method == "none":
        return points
    t0 = time.perf_counter()
    out = []
    if variance_cfg.method == "sandwich":
        for est in points:
            sw = sandwich(f, model, est, df_correct=variance_cfg.df_correct)
            half = Z975 * np.sqrt(sw.variance)
            out.append(_with_variance(est, sw.variance, (est.tau - half, est.tau + half), "sandwich",
                                      variance_cfg.df_correct, sw.df_factor, sw.condition_number))
    else:
        if model_spec is None:
            model_spec = ModelSpec("glmm" if model.kind == "conditional" else "glm", model.spec)
        cfg = variance_cfg.bootstrap or BootstrapConfig()
        res = cluster_bootstrap(data, model_spec, which, cfg, init=model)
        for est in points:
            b = res.summaries[est.estimator]
            diag = {"replicates": res.n_ok, "failed": res.n_failed, "failures": dict(res.failures)}
            out.append(_with_variance(est, b.variance, b.ci95, "bootstrap", False, None, None, diag))
    if timing is not None:
        timing["variance"] = timing.get("variance", 0.0) + time.perf_counter() - t0
    return out


def _with_variance(est, var, ci, method, dfc, dff, cond, diag=None):
    return SaceEstimate(est.tau, est.mu1, est.mu0, est.estimator, est.model_kind, float(var),
                        (float(ci[0]), float(ci[1])), method, dfc, dff, cond, diag or {})


def estimate_all(data: CrtDataset, model_spec: ModelSpec, which="both", df_correct=True,
                 variance="sandwich", validate=True):
    """Fit ``model_spec`` to ``data`` and return every requested estimate."""
    if validate:
        require_valid(data)
    model = model_spec.fit(data)
    return estimate(data, model, which, VarianceConfig(variance, df_correct), model_spec)
