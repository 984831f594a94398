"""Synthetic cluster-randomized trials with truncation by death.

Potential survival follows a random-intercept logistic law

    S_ij(a) ~ Bern(expit(0.75 + delta a + 0.1 X1 - 0.05 X2 + 0.1 C1 + b_i)),

either independently per arm ("stochastic" monotonicity) or through one latent
logistic variable thresholded at -delta and 0 ("deterministic").  Potential
outcomes are Gaussian,

    Y_ij(a) ~ N((a + 1)(1 + 0.25 X1 + 0.125 X2) + b*_i, sigma2_eps),

with b_i = xi b*_i, xi calibrated to the survival ICC lambda and sigma2_eps to
the outcome ICC rho.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import CrtDataset, DesignSpec
from .errors import ConfigError, EstimationError, SaceError, StudyError
from .survival import FitOptions, ModelSpec

__all__ = [
    "SimScenario",
    "ScienceTable",
    "icc_to_xi",
    "xi_to_icc",
    "generate_science",
    "true_sace",
    "randomize_observe",
    "simulate_dataset",
    "StudyConfig",
    "PerformanceRow",
    "PerformanceTable",
    "run_study",
    "preset",
    "PRESETS",
    "stream",
]

LOGISTIC_VAR = math.pi ** 2 / 3.0
ALWAYS, PROTECTED, HARMED, NEVER = 0, 1, 2, 3
STRATUM_NAMES = ("always-survivor", "protected", "harmed", "never-survivor")

_BASE_BETA = dict(intercept=0.75, x1=0.1, x2=-0.05, c1=0.1)


def stream(seed, *key):
    """Counter-based generator for the stream (seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


# stream tags
TAG_DATA, TAG_TRUTH, TAG_ASSIGN = 1, 2, 3


def icc_to_xi(lam, sigma2_bstar=1.0 / 9.0):
    """Scale xi such that xi^2 s / (xi^2 s + pi^2/3) = lam, with s = sigma2_bstar."""
    if not 0.0 <= lam < 1.0:
        raise ConfigError(f"survival ICC must lie in [0, 1), got {lam!r}")
    if not sigma2_bstar > 0:
        raise ConfigError(f"sigma2_bstar must be positive, got {sigma2_bstar!r}")
    return math.sqrt(lam * LOGISTIC_VAR / ((1.0 - lam) * sigma2_bstar))


def xi_to_icc(xi, sigma2_bstar=1.0 / 9.0):
    v = xi * xi * sigma2_bstar
    return v / (v + LOGISTIC_VAR)


@dataclass(frozen=True)
class SimScenario:
    """Generator configuration for one trial design."""

    n_c: int
    delta: float = 0.0
    lam: float = 0.1
    rho: float = 0.1
    sigma2_bstar: float = 1.0 / 9.0
    size_range: tuple = (25, 50)
    monotonicity: str = "stochastic"
    assignment_prob: float = 0.5
    seed: int = 0
    name: Optional[str] = None
    x1_mean: float = 2.0
    x1_var: float = 0.5
    x2_mean: float = 0.5
    x2_var: float = 0.25
    c1_prob: float = 0.3

    def __post_init__(self):
        if isinstance(self.n_c, bool) or not isinstance(self.n_c, (int, np.integer)) or self.n_c < 1:
            raise ConfigError(f"n_c must be a positive integer, got {self.n_c!r}")
        lo, hi = self.size_range
        if not (int(lo) == lo and int(hi) == hi and 1 <= lo <= hi):
            raise ConfigError(f"size_range must be integers 1 <= lo <= hi, got {self.size_range!r}")
        object.__setattr__(self, "size_range", (int(lo), int(hi)))
        icc_to_xi(self.lam, self.sigma2_bstar)
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"outcome ICC must lie in [0, 1), got {self.rho!r}")
        if self.monotonicity not in ("stochastic", "deterministic"):
            raise ConfigError(f"monotonicity must be stochastic or deterministic, got {self.monotonicity!r}")
        if self.monotonicity == "deterministic" and not self.delta > 0:
            raise ConfigError("deterministic monotonicity requires delta > 0")
        if not 0.0 <= self.assignment_prob <= 1.0:
            raise ConfigError(f"assignment_prob must lie in [0, 1], got {self.assignment_prob!r}")
        if min(self.x1_var, self.x2_var) < 0 or not 0 <= self.c1_prob <= 1:
            raise ConfigError("covariate variances must be >= 0 and c1_prob in [0, 1]")

    @property
    def xi(self):
        return icc_to_xi(self.lam, self.sigma2_bstar)

    @property
    def sigma2_eps(self):
        """Outcome noise variance implied by rho: sigma2_bstar (1 - rho) / rho."""
        if self.rho == 0:
            return 1.0
        return self.sigma2_bstar * (1.0 - self.rho) / self.rho

    @property
    def label(self):
        if self.name:
            return self.name
        return f"nc{self.n_c}_d{self.delta:.4g}_l{self.lam:g}_{self.monotonicity[:3]}"

    def to_dict(self):
        d = asdict(self)
        d["size_range"] = list(self.size_range)
        return d


@dataclass(frozen=True)
class ScienceTable:
    """Full potential-outcome table (simulator-only knowledge).

    Per individual: ``s0``, ``s1`` (0/1), ``y0``, ``y1`` with presence masks
    equal to ``s0``/``s1``, and the principal ``stratum`` code
    (0 always-survivor, 1 protected, 2 harmed, 3 never-survivor).
    """

    sizes: np.ndarray
    b: np.ndarray
    bstar: np.ndarray
    x: np.ndarray
    c: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    stratum: np.ndarray

    @property
    def n_clusters(self):
        return len(self.sizes)

    @property
    def cluster_index(self):
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    def stratum_fractions(self):
        counts = np.bincount(self.stratum, minlength=4)
        return dict(zip(STRATUM_NAMES, counts / counts.sum()))


def stratum_of(s1, s0):
    """Principal stratum code from (S(1), S(0))."""
    s1 = np.asarray(s1, dtype=int)
    s0 = np.asarray(s0, dtype=int)
    return np.where(s1 == 1, np.where(s0 == 1, ALWAYS, PROTECTED), np.where(s0 == 1, HARMED, NEVER))


def _draw_science(sc: SimScenario, n_c, rng) -> ScienceTable:
    lo, hi = sc.size_range
    sizes = rng.integers(lo, hi + 1, size=n_c)
    n = int(sizes.sum())
    cl = np.repeat(np.arange(n_c), sizes)
    bstar = rng.normal(0.0, math.sqrt(sc.sigma2_bstar), size=n_c)
    b = sc.xi * bstar
    c1 = (rng.random(n_c) < sc.c1_prob).astype(float)
    x1 = rng.normal(sc.x1_mean, math.sqrt(sc.x1_var), size=n)
    x2 = rng.normal(sc.x2_mean, math.sqrt(sc.x2_var), size=n)
    base = (_BASE_BETA["intercept"] + _BASE_BETA["x1"] * x1 + _BASE_BETA["x2"] * x2
            + _BASE_BETA["c1"] * c1[cl] + b[cl])
    if sc.monotonicity == "stochastic":
        u0 = rng.random(n)
        u1 = rng.random(n)
        s0 = (u0 < _expit(base)).astype(np.int8)
        s1 = (u1 < _expit(base + sc.delta)).astype(np.int8)
    else:
        g = base + rng.logistic(0.0, 1.0, size=n)
        s1 = (g > -sc.delta).astype(np.int8)
        s0 = (g > 0.0).astype(np.int8)
    mean0 = 1.0 + 0.25 * x1 + 0.125 * x2
    sd = math.sqrt(sc.sigma2_eps)
    e0 = rng.normal(0.0, sd, size=n)
    e1 = rng.normal(0.0, sd, size=n)
    y0 = np.where(s0 == 1, mean0 + bstar[cl] + e0, np.nan)
    y1 = np.where(s1 == 1, 2.0 * mean0 + bstar[cl] + e1, np.nan)
    return ScienceTable(sizes, b, bstar, np.column_stack([x1, x2]), c1[:, None],
                        s0, s1, y0, y1, stratum_of(s1, s0))


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_science(scenario: SimScenario, rng=None, n_c=None) -> ScienceTable:
    """Draw a science table; ``rng`` defaults to the scenario's data stream."""
    rng = stream(scenario.seed, 0, TAG_DATA) if rng is None else rng
    return _draw_science(scenario, scenario.n_c if n_c is None else int(n_c), rng)


def sace_of(science: ScienceTable) -> float:
    """Mean of Y(1) - Y(0) over always-survivors (ratio-difference form)."""
    always = science.stratum == ALWAYS
    k = int(always.sum())
    if k == 0:
        raise EstimationError("science table has no always-survivors; the SACE is undefined")
    return float(np.sum(science.y1[always]) / k - np.sum(science.y0[always]) / k)


def true_sace(scenario: SimScenario, oracle_nc: int = 1000, rng=None) -> float:
    """SACE over always-survivors of a fresh ``oracle_nc``-cluster draw."""
    rng = stream(scenario.seed, 0, TAG_TRUTH) if rng is None else rng
    return sace_of(_draw_science(scenario, oracle_nc, rng))


def randomize_observe(science: ScienceTable, p: float = 0.5, rng=None) -> CrtDataset:
    """Assign each cluster to treatment with probability ``p`` and reveal
    (S(A), Y(A) if survivor).  Latent effects and strata are not copied."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"assignment probability must lie in [0, 1], got {p!r}")
    rng = np.random.default_rng() if rng is None else rng
    n_c = science.n_clusters
    a = (rng.random(n_c) < p).astype(np.int8)
    ai = a[science.cluster_index]
    s = np.where(ai == 1, science.s1, science.s0)
    y = np.where(ai == 1, science.y1, science.y0)
    present = s == 1
    ids = tuple(f"k{i + 1}" for i in range(n_c))
    return CrtDataset(ids, a, science.sizes, s, np.where(present, y, 0.0), present,
                      science.x, science.c)


def simulate_dataset(scenario: SimScenario, rep: int = 0):
    """Observed dataset and true SACE for replicate ``rep`` of ``scenario``.

    Each piece has its own stream keyed by (seed, rep, tag), so results do not
    depend on execution order.
    """
    science = _draw_science(scenario, scenario.n_c, stream(scenario.seed, rep, TAG_DATA))
    data = randomize_observe(science, scenario.assignment_prob, stream(scenario.seed, rep, TAG_ASSIGN))
    return data, science


# ---------------------------------------------------------------------------
# Monte-Carlo studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    """Estimator/model combinations evaluated by :func:`run_study`.

    ``truth`` is "per-replicate" (a fresh oracle draw for every simulated
    trial) or "per-study" (one oracle draw shared by all replicates).
    """

    estimators: tuple = ("SSW", "PSW")
    models: tuple = ("glmm",)
    df_correct: bool = True
    quad_order: int = 25
    oracle_nc: int = 1000
    truth: str = "per-replicate"
    max_fail_fraction: float = 0.05
    spec: DesignSpec = DesignSpec()

    def __post_init__(self):
        for e in self.estimators:
            if e not in ("SSW", "PSW"):
                raise ConfigError(f"unknown estimator {e!r}")
        for m in self.models:
            ModelSpec(m)
        if self.truth not in ("per-replicate", "per-study"):
            raise ConfigError(f"truth must be per-replicate or per-study, got {self.truth!r}")
        if self.oracle_nc < 1:
            raise ConfigError("oracle_nc must be positive")


@dataclass(frozen=True)
class PerformanceRow:
    scenario_id: str
    estimator: str
    model: str
    mean_estimate: float
    bias: float
    emp_var: float
    avg_model_var: float
    coverage: float
    n_failed: int
    n_ok: int


@dataclass
class PerformanceTable:
    """Aggregated performance plus the raw per-replicate records.

    ``records[(estimator, model)]`` is an array with columns
    (replicate, tau_hat, variance, truth) for successful replicates.
    """

    rows: list
    records: dict = field(default_factory=dict, repr=False)
    failures: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def row(self, estimator, model):
        for r in self.rows:
            if r.estimator == estimator and r.model in (model, _model_label(model)):
                return r
        raise KeyError((estimator, model))


def _model_label(model):
    return "conditional" if model in ("glmm", "conditional") else "marginal"


def _one_replicate(args):
    from .estimators import estimate_all

    scenario, cfg, rep, truth_shared = args
    data, science = simulate_dataset(scenario, rep)
    if truth_shared is None:
        truth = true_sace(scenario, cfg.oracle_nc, stream(scenario.seed, rep, TAG_TRUTH))
    else:
        truth = truth_shared
    out = {}
    for m in cfg.models:
        mspec = ModelSpec(m, cfg.spec, FitOptions(quad_order=cfg.quad_order))
        try:
            ests = estimate_all(data, mspec, cfg.estimators, df_correct=cfg.df_correct)
            out[m] = ([(e.estimator, e.tau, e.variance) for e in ests], None)
        except SaceError as exc:
            out[m] = (None, type(exc).__name__)
    return rep, truth, out


def _workers(threads):
    if threads is None:
        threads = int(os.environ.get("SACE_THREADS", "1") or 1)
    return max(1, int(threads))


def run_study(scenario: SimScenario, reps: int, cfg: StudyConfig = StudyConfig(),
              threads=None, progress=None) -> PerformanceTable:
    """Monte-Carlo performance of every (estimator, model) in ``cfg``.

    For each of ``reps`` simulated trials, each model is fit once and every
    estimator is computed from that fit with its sandwich variance.  Failed
    fits are dropped and counted per model; more than
    ``cfg.max_fail_fraction`` failures raises :class:`StudyError`.
    """
    import time

    if isinstance(reps, bool) or not isinstance(reps, (int, np.integer)) or reps < 2:
        raise ConfigError(f"reps must be an integer >= 2, got {reps!r}")
    t0 = time.perf_counter()
    shared = None
    if cfg.truth == "per-study":
        shared = true_sace(scenario, cfg.oracle_nc, stream(scenario.seed, 0, TAG_TRUTH))
    jobs = [(scenario, cfg, r, shared) for r in range(reps)]
    n_workers = _workers(threads)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as ex:
            results = list(ex.map(_one_replicate, jobs, chunksize=max(1, reps // (4 * n_workers))))
    else:
        results = []
        for j in jobs:
            results.append(_one_replicate(j))
            if progress is not None:
                progress(len(results), reps)
    results.sort(key=lambda r: r[0])

    rows, records, failures = [], {}, {}
    for m in cfg.models:
        fails = {}
        per_est = {e: [] for e in cfg.estimators}
        for rep, truth, out in results:
            ests, err = out[m]
            if ests is None:
                fails[err] = fails.get(err, 0) + 1
                continue
            for name, tau, var in ests:
                per_est[name].append((rep, tau, var, truth))
        n_failed = sum(fails.values())
        failures[m] = fails
        if n_failed > cfg.max_fail_fraction * reps:
            raise StudyError(
                f"{n_failed} of {reps} replicates failed for model {m} ({fails})", fails)
        for e in cfg.estimators:
            rec = np.array(per_est[e], dtype=float).reshape(-1, 4)
            records[(e, m)] = rec
            rows.append(_summarize(scenario.label, e, _model_label(m), rec, n_failed))
    return PerformanceTable(rows, records, failures, {"total": time.perf_counter() - t0})


def _summarize(sid, estimator, model, rec, n_failed) -> PerformanceRow:
    tau, var, truth = rec[:, 1], rec[:, 2], rec[:, 3]
    half = 1.959963984540054 * np.sqrt(var)
    cover = np.mean((tau - half <= truth) & (truth <= tau + half))
    return PerformanceRow(
        sid, estimator, model, float(tau.mean()), float(np.mean(tau - truth)),
        float(np.var(tau, ddof=1)), float(var.mean()), float(cover), int(n_failed), len(tau),
    )


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

DELTA_LEVELS = (0.0, math.log(1.25), math.log(5.0))
LAMBDA_LEVELS = (0.1, 0.3)
NC_LEVELS = (30, 60, 90)


def _grid(monotonicity, deltas):
    out = []
    for lam in LAMBDA_LEVELS:
        for d in deltas:
            for n_c in NC_LEVELS:
                name = f"{monotonicity[:3]}_l{lam:g}_d{d:.3f}_nc{n_c}"
                out.append(SimScenario(n_c=n_c, delta=d, lam=lam, monotonicity=monotonicity, name=name))
    return tuple(out)


PRESETS = {
    # Stochastic monotonicity grid: 2 survival ICCs x 3 effects x 3 trial sizes.
    "table2": _grid("stochastic", DELTA_LEVELS),
    # Deterministic monotonicity needs delta > 0.
    "deterministic": _grid("deterministic", DELTA_LEVELS[1:]),
    "smoke": (SimScenario(n_c=30, delta=0.0, lam=0.1, name="smoke"),),
}


def preset(name: str, seed: int = 0) -> Sequence[SimScenario]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(sorted(PRESETS))})")
    return tuple(replace(s, seed=seed) for s in PRESETS[name])
