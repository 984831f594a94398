"""Observed-data representation of a parallel-arm cluster-randomized trial.

A :class:`CrtDataset` stores flat, cluster-contiguous numpy arrays so that the
numerical code can work with ``np.add.reduceat`` over cluster blocks.  The
truncation-by-death state is carried by an explicit ``outcome_present`` mask;
outcome values of non-survivors are never used in arithmetic.
"""

import csv
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "Individual",
    "Cluster",
    "CrtDataset",
    "Violation",
    "ValidationReport",
    "validate_dataset",
    "require_valid",
    "DesignSpec",
    "DesignMatrices",
    "ModelFrame",
    "build_design",
    "model_frame",
    "ColumnMap",
    "read_csv",
    "write_csv",
]


@dataclass(frozen=True)
class Individual:
    survival: int
    outcome: Optional[float]
    covariates: tuple = ()


@dataclass(frozen=True)
class Cluster:
    id: str
    treatment: int
    individuals: tuple
    cluster_covariates: tuple = ()

    @property
    def size(self):
        return len(self.individuals)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class CrtDataset:
    """Observed trial data, stored cluster-contiguously.

    Parameters
    ----------
    cluster_ids : sequence of str, length n_c
    treatment : (n_c,) array of 0/1
    sizes : (n_c,) array of cluster sizes n_i
    survival : (N,) array of 0/1, N = sum(sizes)
    outcome : (N,) float array; entries with ``outcome_present == False`` are ignored
    outcome_present : (N,) bool array
    covariates : (N, k) float array of individual covariates X_ij
    cluster_covariates : (n_c, m) float array of observed cluster covariates C_i
    """

    def __init__(
        self,
        cluster_ids,
        treatment,
        sizes,
        survival,
        outcome,
        outcome_present,
        covariates=None,
        cluster_covariates=None,
    ):
        self.cluster_ids = tuple(str(c) for c in cluster_ids)
        self.treatment = _frozen(treatment, np.int64)
        self.sizes = _frozen(sizes, np.int64)
        n_c = len(self.cluster_ids)
        n = int(self.sizes.sum()) if n_c else 0
        self.survival = _frozen(survival, np.int64)
        present = np.array(outcome_present, dtype=bool)
        values = np.where(present, np.asarray(outcome, dtype=float), 0.0)
        self.outcome_present = _frozen(present, bool)
        self.outcome = _frozen(values, float)
        if covariates is None:
            covariates = np.zeros((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        self.covariates = _frozen(covariates, float)
        if cluster_covariates is None:
            cluster_covariates = np.zeros((n_c, 0))
        cluster_covariates = np.asarray(cluster_covariates, dtype=float)
        if cluster_covariates.ndim == 1:
            cluster_covariates = cluster_covariates[:, None]
        self.cluster_covariates = _frozen(cluster_covariates, float)

        if self.treatment.shape != (n_c,) or self.sizes.shape != (n_c,):
            raise InputError("treatment and sizes must have one entry per cluster")
        for name, arr in (("survival", self.survival), ("outcome", self.outcome),
                          ("outcome_present", self.outcome_present)):
            if arr.shape != (n,):
                raise InputError(f"{name} must have length sum(sizes) = {n}")
        if self.covariates.shape[0] != n:
            raise InputError("covariates must have one row per individual")
        if self.cluster_covariates.shape[0] != n_c:
            raise InputError("cluster_covariates must have one row per cluster")

        starts = np.zeros(n_c, dtype=np.int64)
        if n_c:
            starts[1:] = np.cumsum(self.sizes)[:-1]
        self.starts = _frozen(starts, np.int64)
        self.cluster_index = _frozen(np.repeat(np.arange(n_c), np.maximum(self.sizes, 0)), np.int64)

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_clusters(cls, clusters: Sequence[Cluster]) -> "CrtDataset":
        ids, treat, sizes, surv, out, present, cov, ccov = [], [], [], [], [], [], [], []
        for cl in clusters:
            ids.append(cl.id)
            treat.append(cl.treatment)
            sizes.append(len(cl.individuals))
            ccov.append(tuple(cl.cluster_covariates))
            for ind in cl.individuals:
                surv.append(ind.survival)
                present.append(ind.outcome is not None)
                out.append(0.0 if ind.outcome is None else float(ind.outcome))
                cov.append(tuple(ind.covariates))
        k = len(cov[0]) if cov else 0
        m = len(ccov[0]) if ccov else 0
        if any(len(c) != k for c in cov):
            raise InputError("individuals have differing covariate dimensionality")
        if any(len(c) != m for c in ccov):
            raise InputError("clusters have differing cluster-covariate dimensionality")
        return cls(
            ids, treat, sizes, surv, out, present,
            np.array(cov, dtype=float).reshape(len(cov), k),
            np.array(ccov, dtype=float).reshape(len(ccov), m),
        )

    # -- views ------------------------------------------------------------

    @property
    def n_clusters(self):
        return len(self.cluster_ids)

    @property
    def n_individuals(self):
        return int(self.survival.shape[0])

    @property
    def individual_treatment(self):
        return self.treatment[self.cluster_index]

    @property
    def survivor_outcomes(self):
        return self.outcome[self.outcome_present]

    @property
    def clusters(self):
        out = []
        for i, cid in enumerate(self.cluster_ids):
            lo, hi = self.starts[i], self.starts[i] + self.sizes[i]
            inds = tuple(
                Individual(
                    int(self.survival[r]),
                    float(self.outcome[r]) if self.outcome_present[r] else None,
                    tuple(float(v) for v in self.covariates[r]),
                )
                for r in range(lo, hi)
            )
            out.append(Cluster(cid, int(self.treatment[i]), inds,
                               tuple(float(v) for v in self.cluster_covariates[i])))
        return out

    def take(self, cluster_indices, relabel=False) -> "CrtDataset":
        """Dataset built from the given clusters (repeats allowed), in that order."""
        idx = np.asarray(cluster_indices, dtype=np.int64)
        sizes = self.sizes[idx]
        rows = np.concatenate([np.arange(self.starts[i], self.starts[i] + self.sizes[i])
                               for i in idx]) if len(idx) else np.zeros(0, dtype=np.int64)
        if relabel:
            ids = [f"{self.cluster_ids[i]}#{k}" for k, i in enumerate(idx)]
        else:
            ids = [self.cluster_ids[i] for i in idx]
        return CrtDataset(
            ids, self.treatment[idx], sizes, self.survival[rows], self.outcome[rows],
            self.outcome_present[rows], self.covariates[rows], self.cluster_covariates[idx],
        )

    def with_outcome(self, outcome) -> "CrtDataset":
        """Same dataset with survivor outcomes replaced (non-survivor entries ignored)."""
        return CrtDataset(
            self.cluster_ids, self.treatment, self.sizes, self.survival, outcome,
            self.outcome_present, self.covariates, self.cluster_covariates,
        )

    def __repr__(self):
        return (f"CrtDataset(n_clusters={self.n_clusters}, n_individuals={self.n_individuals}, "
                f"k={self.covariates.shape[1]}, m={self.cluster_covariates.shape[1]})")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    cluster: Optional[str]
    rule: str
    detail: str = ""


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def rules(self):
        return {v.rule for v in self.violations}

    def to_dict(self):
        return {
            "passed": self.passed,
            "violations": [
                {"cluster": v.cluster, "rule": v.rule, "detail": v.detail}
                for v in self.violations
            ],
        }


def validate_dataset(data: CrtDataset) -> ValidationReport:
    """Check every dataset invariant and report violations (never raises)."""
    report = ValidationReport()
    add = report.violations.append
    ids = data.cluster_ids

    seen = set()
    for cid in ids:
        if cid in seen:
            add(Violation(cid, "duplicate-cluster-id"))
        seen.add(cid)

    for i in np.flatnonzero(data.sizes < 1):
        add(Violation(ids[i], "empty-cluster", "cluster size must be >= 1"))
    for i in np.flatnonzero(~np.isin(data.treatment, (0, 1))):
        add(Violation(ids[i], "non-binary-treatment", f"treatment={data.treatment[i]}"))

    cl = data.cluster_index
    s = data.survival
    bad = ~np.isin(s, (0, 1))
    for r in np.flatnonzero(bad):
        add(Violation(ids[cl[r]], "non-binary-survival", f"row {r}: survival={s[r]}"))
    for r in np.flatnonzero((s == 0) & data.outcome_present):
        add(Violation(ids[cl[r]], "outcome-without-survival", f"row {r}"))
    for r in np.flatnonzero((s == 1) & ~data.outcome_present):
        add(Violation(ids[cl[r]], "survival-without-outcome", f"row {r}"))
    for r in np.flatnonzero(data.outcome_present & ~np.isfinite(data.outcome)):
        add(Violation(ids[cl[r]], "non-finite-outcome", f"row {r}"))
    for r in np.flatnonzero(~np.all(np.isfinite(data.covariates), axis=1)):
        add(Violation(ids[cl[r]], "non-finite-covariate", f"row {r}"))
    for i in np.flatnonzero(~np.all(np.isfinite(data.cluster_covariates), axis=1)):
        add(Violation(ids[i], "non-finite-cluster-covariate"))

    arms = set(np.unique(data.treatment).tolist()) & {0, 1}
    if arms != {0, 1}:
        add(Violation(None, "single-arm dataset", f"arms present: {sorted(arms)}"))
    return report


def require_valid(data: CrtDataset) -> None:
    report = validate_dataset(data)
    if not report.passed:
        shown = "; ".join(f"{v.rule} ({v.cluster})" for v in report.violations[:5])
        more = len(report.violations) - 5
        if more > 0:
            shown += f"; ... {more} more"
        raise InputError(f"dataset failed validation: {shown}")


# ---------------------------------------------------------------------------
# Design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpec:
    """Regressor layout D_ij = (1, A_i, X_ij[sel], C_i[sel]).

    ``None`` for an index list means "all columns".
    """

    intercept: bool = True
    include_treatment: bool = True
    individual_covariate_indices: Optional[tuple] = None
    cluster_covariate_indices: Optional[tuple] = None

    def resolve(self, k, m):
        xi = tuple(range(k)) if self.individual_covariate_indices is None \
            else tuple(int(j) for j in self.individual_covariate_indices)
        ci = tuple(range(m)) if self.cluster_covariate_indices is None \
            else tuple(int(j) for j in self.cluster_covariate_indices)
        for j in xi:
            if not 0 <= j < k:
                raise ConfigError(f"individual covariate index {j} out of bounds (k={k})")
        for j in ci:
            if not 0 <= j < m:
                raise ConfigError(f"cluster covariate index {j} out of bounds (m={m})")
        return xi, ci

    def dimension(self, k, m):
        xi, ci = self.resolve(k, m)
        return int(self.intercept) + int(self.include_treatment) + len(xi) + len(ci)

    @property
    def treatment_column(self):
        if not self.include_treatment:
            return None
        return 1 if self.intercept else 0


@dataclass(frozen=True)
class DesignMatrices:
    """Stacked regressor rows, cluster-contiguous in dataset order.

    Row ``r`` belongs to cluster ``cluster_index[r]``; cluster ``i`` occupies rows
    ``starts[i] : starts[i] + sizes[i]`` in the dataset's individual order.
    """

    matrix: np.ndarray
    starts: np.ndarray
    sizes: np.ndarray
    cluster_index: np.ndarray
    columns: tuple
    treatment_column: Optional[int]

    @property
    def p(self):
        return self.matrix.shape[1]

    def cluster_block(self, i):
        return self.matrix[self.starts[i]: self.starts[i] + self.sizes[i]]


def build_design(data: CrtDataset, spec: DesignSpec = DesignSpec(), a=None) -> DesignMatrices:
    """Assemble D_ij, with the treatment column set to the observed A_i or to ``a``.

    ``a`` may be ``None`` (observed assignment), a scalar 0/1 applied to every
    cluster, or a per-cluster array.
    """
    k = data.covariates.shape[1]
    m = data.cluster_covariates.shape[1]
    xi, ci = spec.resolve(k, m)
    n = data.n_individuals
    cols, names = [], []
    if spec.intercept:
        cols.append(np.ones(n))
        names.append("intercept")
    if spec.include_treatment:
        if a is None:
            arm = data.treatment
        else:
            arm = np.broadcast_to(np.asarray(a), (data.n_clusters,))
            if not np.all(np.isin(arm, (0, 1))):
                raise ConfigError("counterfactual treatment must be 0 or 1")
        cols.append(np.asarray(arm, dtype=float)[data.cluster_index])
        names.append("treatment")
    for j in xi:
        cols.append(data.covariates[:, j])
        names.append(f"x{j + 1}")
    for j in ci:
        cols.append(data.cluster_covariates[data.cluster_index, j])
        names.append(f"c{j + 1}")
    mat = np.column_stack(cols) if cols else np.zeros((n, 0))
    mat = np.ascontiguousarray(mat, dtype=float)
    mat.setflags(write=False)
    return DesignMatrices(mat, data.starts, data.sizes, data.cluster_index,
                          tuple(names), spec.treatment_column)


@dataclass(frozen=True)
class ModelFrame:
    """Everything the numerical layers need, as flat arrays."""

    X: np.ndarray          # observed design
    X0: np.ndarray         # design with A set to 0
    X1: np.ndarray         # design with A set to 1
    s: np.ndarray          # survival, float
    y: np.ndarray          # outcome, zero where absent
    arm: np.ndarray        # per-individual treatment, float
    starts: np.ndarray
    sizes: np.ndarray
    cluster_index: np.ndarray
    spec: DesignSpec
    columns: tuple

    @property
    def n_clusters(self):
        return len(self.starts)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def treatment(self):
        return self.arm[self.starts]


def model_frame(data: CrtDataset, spec: DesignSpec = DesignSpec()) -> ModelFrame:
    if not spec.include_treatment:
        raise ConfigError("the survival model must include a treatment coefficient")
    obs = build_design(data, spec)
    x0 = build_design(data, spec, 0).matrix
    x1 = build_design(data, spec, 1).matrix
    y = np.where(data.outcome_present, data.outcome, 0.0)
    return ModelFrame(
        obs.matrix, x0, x1, data.survival.astype(float), y,
        data.individual_treatment.astype(float), data.starts, data.sizes,
        data.cluster_index, spec, obs.columns,
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMap:
    """Header names used to read a long-format trial export.

    ``covariates``/``cluster_covariates`` of ``None`` select every header of the
    form ``x<k>``/``c<k>``, in numeric order.
    """

    cluster: str = "cluster_id"
    treatment: str = "treatment"
    survival: str = "survival"
    outcome: str = "outcome"
    covariates: Optional[tuple] = None
    cluster_covariates: Optional[tuple] = None

    def resolve(self, header):
        def pick(prefix):
            pat = re.compile(rf"^{prefix}(\d+)$")
            found = [(int(mt.group(1)), h) for h in header if (mt := pat.match(h))]
            return tuple(h for _, h in sorted(found))

        xs = pick("x") if self.covariates is None else tuple(self.covariates)
        cs = pick("c") if self.cluster_covariates is None else tuple(self.cluster_covariates)
        required = [self.cluster, self.treatment, self.survival, self.outcome, *xs, *cs]
        missing = [h for h in required if h not in header]
        if missing:
            raise InputError(f"CSV header is missing required column(s): {', '.join(missing)}")
        return xs, cs


def _parse_float(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise InputError(f"row {row}, column '{col}': malformed numeric value {text!r}") from None


def _parse_binary(text, row, col):
    v = _parse_float(text, row, col)
    if v not in (0.0, 1.0):
        raise InputError(f"row {row}, column '{col}': expected 0 or 1, got {text!r}")
    return int(v)


def read_csv(path, schema: ColumnMap = ColumnMap()) -> CrtDataset:
    """Read a long-format CSV (one row per individual) into a dataset.

    Rows of a cluster need not be adjacent; clusters keep first-appearance order.
    An empty outcome cell means "no outcome" and is required for non-survivors.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        xs, cs = schema.resolve(header)
        pos = {h: j for j, h in enumerate(header)}

        order = []
        groups = {}
        for rnum, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise InputError(f"row {rnum}: expected {len(header)} fields, got {len(raw)}")
            cell = {h: raw[pos[h]].strip() for h in header}
            cid = cell[schema.cluster]
            if not cid:
                raise InputError(f"row {rnum}, column '{schema.cluster}': empty cluster id")
            a = _parse_binary(cell[schema.treatment], rnum, schema.treatment)
            s = _parse_binary(cell[schema.survival], rnum, schema.survival)
            ytxt = cell[schema.outcome]
            y = None if ytxt == "" else _parse_float(ytxt, rnum, schema.outcome)
            if s == 0 and y is not None:
                raise InputError(
                    f"row {rnum}: outcome {ytxt!r} present for a non-survivor (survival=0)")
            x = tuple(_parse_float(cell[h], rnum, h) for h in xs)
            c = tuple(_parse_float(cell[h], rnum, h) for h in cs)
            if cid not in groups:
                order.append(cid)
                groups[cid] = {"a": a, "c": c, "rows": []}
            g = groups[cid]
            if g["a"] != a:
                raise InputError(f"row {rnum}: treatment differs within cluster {cid!r}")
            if g["c"] != c:
                raise InputError(f"row {rnum}: cluster covariates differ within cluster {cid!r}")
            g["rows"].append(Individual(s, y, x))

    clusters = [Cluster(cid, groups[cid]["a"], tuple(groups[cid]["rows"]), groups[cid]["c"])
                for cid in order]
    if not clusters:
        raise InputError(f"{path}: no data rows")
    return CrtDataset.from_clusters(clusters)


def _fmt(v):
    return repr(float(v))


def write_csv(data: CrtDataset, path, schema: ColumnMap = ColumnMap()) -> None:
    k = data.covariates.shape[1]
    m = data.cluster_covariates.shape[1]
    xs = schema.covariates or tuple(f"x{j + 1}" for j in range(k))
    cs = schema.cluster_covariates or tuple(f"c{j + 1}" for j in range(m))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.cluster, schema.treatment, schema.survival, schema.outcome, *xs, *cs])
        for r in range(data.n_individuals):
            i = data.cluster_index[r]
            y = _fmt(data.outcome[r]) if data.outcome_present[r] else ""
            w.writerow([
                data.cluster_ids[i], int(data.treatment[i]), int(data.survival[r]), y,
                *(_fmt(v) for v in data.covariates[r]),
                *(_fmt(v) for v in data.cluster_covariates[i]),
            ])
