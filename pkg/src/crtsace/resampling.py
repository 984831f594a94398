"""Non-parametric cluster bootstrap.

Whole clusters are resampled with replacement (keeping their sizes and
within-cluster structure), the survival model is refit and every requested
estimator recomputed.  Replicate r draws from its own stream keyed by
(seed, r), so serial and parallel runs agree bit for bit.  Clusters are
indexed in sorted-id order, which makes the result independent of the
input cluster order.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import CrtDataset, require_valid
from .errors import BootstrapInstabilityError, ConfigError, SaceError
from .survival import FittedSurvivalModel, ModelSpec

__all__ = ["BootstrapConfig", "BootstrapSummary", "BootstrapResult", "cluster_bootstrap"]


@dataclass(frozen=True)
class BootstrapConfig:
    """Cluster bootstrap settings.

    ``max_fail_fraction`` is the share of failed replicates (single-arm
    resample, fit or estimation failure) tolerated before raising.
    """

    replicates: int = 250
    seed: int = 0
    ci: str = "percentile"
    parallel: bool = False
    threads: Optional[int] = None
    max_fail_fraction: float = 0.10

    def __post_init__(self):
        if isinstance(self.replicates, bool) or not isinstance(self.replicates, (int, np.integer)) \
                or self.replicates < 2:
            raise ConfigError(f"bootstrap replicates must be an integer >= 2, got {self.replicates!r}")
        if self.ci != "percentile":
            raise ConfigError(f"only percentile intervals are supported, got {self.ci!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit non-negative integer")


@dataclass(frozen=True)
class BootstrapSummary:
    variance: float
    ci95: tuple
    replicates: np.ndarray


@dataclass(frozen=True)
class BootstrapResult:
    summaries: dict
    n_ok: int
    n_failed: int
    failures: dict = field(default_factory=dict)


def _replicate(args):
    from .estimators import VarianceConfig, estimate

    data, model_spec, which, seed, r, init = args
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(r),)))
    idx = rng.integers(0, data.n_clusters, size=data.n_clusters)
    arms = data.treatment[idx]
    if arms.min() == arms.max():
        return r, None, "single-arm"
    sample = data.take(idx, relabel=True)
    try:
        model = model_spec.fit(sample, init=init)
        ests = estimate(sample, model, which, VarianceConfig("none"))
    except SaceError as exc:
        return r, None, type(exc).__name__
    return r, tuple(e.tau for e in ests), None


def _threads(cfg):
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    return max(1, int(os.environ.get("SACE_THREADS", "1") or 1))


def cluster_bootstrap(data: CrtDataset, model_spec: ModelSpec = ModelSpec(), estimator="both",
                      cfg: BootstrapConfig = BootstrapConfig(),
                      init: Optional[FittedSurvivalModel] = None) -> BootstrapResult:
    """Bootstrap variance and percentile interval of tau_hat.

    Parameters
    ----------
    estimator : "SSW", "PSW", "both" or a sequence of names
        All requested estimators are computed from the same refit.
    init : FittedSurvivalModel, optional
        Warm start for every refit (typically the full-data fit).

    Raises
    ------
    BootstrapInstabilityError
        If more than ``cfg.max_fail_fraction`` of replicates fail.
    """
    from .estimators import _which

    require_valid(data)
    which = _which(estimator)
    # Resample from a canonical (id-sorted) cluster order so that the result
    # does not depend on how the input rows happen to be ordered.
    order = np.argsort(np.asarray(data.cluster_ids, dtype=object), kind="stable")
    if np.any(order != np.arange(data.n_clusters)):
        data = data.take(order)
    jobs = [(data, model_spec, which, cfg.seed, r, init) for r in range(cfg.replicates)]
    n_workers = _threads(cfg) if cfg.parallel else 1
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as ex:
            results = list(ex.map(_replicate, jobs, chunksize=max(1, len(jobs) // (4 * n_workers))))
    else:
        results = [_replicate(j) for j in jobs]
    results.sort(key=lambda t: t[0])
    taus = [t[1] for t in results if t[1] is not None]
    failures = {}
    for _, _, err in results:
        if err is not None:
            failures[err] = failures.get(err, 0) + 1
    n_failed = sum(failures.values())
    if n_failed > cfg.max_fail_fraction * cfg.replicates or len(taus) < 2:
        raise BootstrapInstabilityError(
            f"{n_failed} of {cfg.replicates} bootstrap replicates failed ({failures})", failures)
    arr = np.array(taus)
    summaries = {}
    for j, name in enumerate(which):
        v = arr[:, j]
        lo, hi = np.percentile(v, [2.5, 97.5])
        summaries[name] = BootstrapSummary(float(np.var(v, ddof=1)), (float(lo), float(hi)), v)
    return BootstrapResult(summaries, len(taus), n_failed, failures)
