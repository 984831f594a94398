import numpy as np
import pytest

from conftest import make_dataset
from crtsace.data import CrtDataset, DesignSpec
from crtsace.errors import ConfigError, EstimationError
from crtsace.estimators import (
    Z975,
    SaceEstimate,
    VarianceConfig,
    estimate,
    estimate_all,
    estimate_psw,
    estimate_ssw,
    survival_weights,
)
from crtsace.survival import FitOptions, FittedSurvivalModel, ModelSpec, fit_glm, fit_glmm

NO_COV = DesignSpec(individual_covariate_indices=(), cluster_covariate_indices=())


def flat_model(beta, spec=NO_COV):
    """Marginal model with fixed coefficients (no fitting)."""
    return FittedSurvivalModel("marginal", np.asarray(beta, dtype=float), 0.0, None, 0.0, True, False, spec)


@pytest.fixture(scope="module")
def glmm10(trial10):
    return fit_glmm(trial10)


def hand_fixture():
    return make_dataset([
        ("t1", 1, [(1, 2.0), (0, None)]),
        ("t2", 1, [(1, 4.0)]),
        ("c1", 0, [(1, 1.0), (1, 3.0), (0, None)]),
    ])


class TestSsw:
    def test_hand_fixture(self):
        # treated survivors (Y, p0) = (2, 0.5), (4, 0.25): give them those weights by
        # using a model in which p0 = expit(b_i) with per-cluster modes.
        d = hand_fixture()
        logit = lambda p: np.log(p / (1 - p))
        m = FittedSurvivalModel("conditional", np.zeros(2), 1.0,
                                np.array([[logit(0.5), 1.0], [logit(0.25), 1.0], [0.0, 1.0]]),
                                0.0, True, False, NO_COV)
        w = survival_weights(d, m)
        np.testing.assert_allclose(w.p0[[0, 2]], [0.5, 0.25])
        est = estimate_ssw(d, m)
        assert abs(est.mu1 - 2.0 / 0.75) <= 1e-12
        assert round(est.mu1, 4) == 2.6667

    def test_constant_weights_give_arm_means(self):
        d = hand_fixture()
        est = estimate_ssw(d, flat_model([0.3, 0.0]))
        assert est.mu1 == pytest.approx(3.0, abs=1e-14)
        assert est.mu0 == pytest.approx(2.0, abs=1e-14)
        assert est.tau == est.mu1 - est.mu0

    def test_no_survivors_in_arm(self):
        d = make_dataset([("a", 1, [(0, None), (0, None)]), ("b", 0, [(1, 2.0)])])
        with pytest.raises(EstimationError, match="treated"):
            estimate_ssw(d, flat_model([0.0, 0.0]))
        d = make_dataset([("a", 1, [(1, 1.0)]), ("b", 0, [(0, None)])])
        with pytest.raises(EstimationError, match="control"):
            estimate_ssw(d, flat_model([0.0, 0.0]))


class TestPsw:
    def test_mu0_is_plain_mean_for_any_model(self, trial10, glmm10):
        surv = (trial10.treatment[trial10.cluster_index] == 0) & (trial10.survival == 1)
        plain = float(np.mean(trial10.outcome[surv]))
        glm = fit_glm(trial10)
        glmm15 = fit_glmm(trial10, opts=FitOptions(quad_order=15))
        for m in (glmm10, glm, glmm15, flat_model([1.0, -2.0, 0.0, 0.0, 0.0], DesignSpec())):
            assert estimate_psw(trial10, m).mu0 == plain

    def test_equal_predictions_give_treated_mean(self):
        d = hand_fixture()
        est = estimate_psw(d, flat_model([0.7, 0.0]))
        assert est.mu1 == pytest.approx(3.0, abs=1e-14)

    def test_positivity(self):
        d = hand_fixture()
        with pytest.raises(EstimationError, match="positivity"):
            estimate_psw(d, flat_model([0.0, -1e4]))


class TestProperties:
    def test_tau_stored_exactly(self, trial10, glmm10):
        for e in estimate(trial10, glmm10, "both", VarianceConfig("none")):
            assert e.tau == e.mu1 - e.mu0

    def test_cluster_reordering(self, trial10, glmm10):
        order = np.random.default_rng(1).permutation(trial10.n_clusters)
        shuffled = trial10.take(order)
        m2 = glmm10.with_modes(glmm10.modes[order], glmm10.cluster_modes[order, 1])
        for f in (estimate_ssw, estimate_psw):
            a, b = f(trial10, glmm10), f(shuffled, m2)
            assert abs(a.tau - b.tau) <= 1e-12

    def test_within_cluster_reordering(self, trial10, glmm10):
        rng = np.random.default_rng(2)
        clusters = []
        for c in trial10.clusters:
            idx = rng.permutation(len(c.individuals))
            clusters.append(type(c)(c.id, c.treatment, tuple(c.individuals[i] for i in idx),
                                    c.cluster_covariates))
        d2 = CrtDataset.from_clusters(clusters)
        for f in (estimate_ssw, estimate_psw):
            assert abs(f(trial10, glmm10).tau - f(d2, glmm10).tau) <= 1e-12

    def test_affine_equivariance(self, trial10, glmm10):
        c, shift = -2.5, 7.0
        y = np.where(trial10.outcome_present, c * np.nan_to_num(trial10.outcome) + shift, np.nan)
        d2 = CrtDataset(trial10.cluster_ids, trial10.treatment, trial10.sizes, trial10.survival, y,
                        trial10.outcome_present, trial10.covariates, trial10.cluster_covariates)
        for f in (estimate_ssw, estimate_psw):
            assert abs(f(d2, glmm10).tau - c * f(trial10, glmm10).tau) <= 1e-10

    def test_rare_mortality_estimators_agree(self):
        rng = np.random.default_rng(45)
        rows = []
        for i in range(30):
            a = i % 2
            inds = []
            for _ in range(40):
                x = rng.normal(2, 0.7)
                s = int(rng.random() < 1 / (1 + np.exp(-(2.8 + 0.1 * x + 0.3 * a))))
                inds.append((s, (1.0 + 0.25 * x + a + rng.normal()) if s else None, x))
            rows.append((f"s{i}", a, inds))
        d = make_dataset(rows)
        mortality = 1 - d.survival.mean()
        assert 0.02 < mortality < 0.08
        ssw, psw = estimate_all(d, ModelSpec("glmm", DesignSpec(cluster_covariate_indices=())),
                                variance="none")
        assert abs(ssw.tau - psw.tau) <= 0.02


class TestVarianceOptions:
    def test_none_leaves_fields_absent(self, trial10, glmm10):
        for e in estimate(trial10, glmm10, "both", VarianceConfig("none")):
            assert e.variance is None and e.ci95 is None and e.variance_method is None

    def test_sandwich_populates_ci(self, trial10, glmm10):
        for e in estimate(trial10, glmm10, "both", VarianceConfig("sandwich", df_correct=True)):
            assert e.variance_method == "sandwich" and e.df_corrected
            assert e.df_factor == pytest.approx(10 / 2)
            half = Z975 * np.sqrt(e.variance)
            assert e.ci95 == (e.tau - half, e.tau + half)
            assert e.to_dict()["se"] == pytest.approx(np.sqrt(e.variance))

    def test_which_selection(self, trial10, glmm10):
        assert [e.estimator for e in estimate(trial10, glmm10, "psw", VarianceConfig("none"))] == ["PSW"]
        with pytest.raises(ConfigError):
            estimate(trial10, glmm10, "ipw", VarianceConfig("none"))
        with pytest.raises(ConfigError):
            VarianceConfig("jackknife")

    def test_estimate_invariants(self):
        with pytest.raises(ConfigError):
            SaceEstimate(1.0, 2.0, 1.0, "SSW", "marginal", variance=0.1)
        with pytest.raises(ConfigError):
            SaceEstimate(1.0, 2.0, 1.0, "SSW", "marginal", variance=-0.1, ci95=(0, 1))
