"""Acceptance criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary (and prints
it) before asserting.  The Monte-Carlo studies are cached per module so that
criteria sharing a study run it once.  All studies use seed 1.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, small_trial
from oracles import fd_gradient, fd_jacobian, seven_integrals_trapezoid
from crtsace.data import model_frame
from crtsace.estimators import VarianceConfig, estimate, estimate_psw, estimate_ssw
from crtsace.quadrature import cluster_integrals, gh_nodes
from crtsace.resampling import BootstrapConfig, cluster_bootstrap
from crtsace.simulation import SimScenario, StudyConfig, icc_to_xi, run_study, simulate_dataset, xi_to_icc
from crtsace.survival import ModelSpec, fit_glm, fit_glmm, loglik_glmm, score_glmm
from crtsace.variance import estimating_functions, outer_matrix, sandwich, theta_from_fit

pytestmark = pytest.mark.slow

SEED = 1
REPS = 1000
RESULTS_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "acceptance_results.json")
_cache = {}
_results = {}


def report(criterion, ok, detail, **numbers):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    _results[str(criterion)] = {"pass": bool(ok), "detail": detail, **numbers}
    with open(RESULTS_PATH, "w", encoding="utf-8") as fh:
        json.dump(_results, fh, indent=2, sort_keys=True)


def study(key, scenario, models):
    if key not in _cache:
        t0 = time.perf_counter()
        tab = run_study(scenario, REPS, StudyConfig(models=models))
        tab.timing["per_dataset"] = (time.perf_counter() - t0) / REPS
        _cache[key] = tab
    return _cache[key]


SCEN_A = SimScenario(n_c=30, delta=0.0, lam=0.1, seed=SEED, name="A")
SCEN_B = SimScenario(n_c=90, delta=math.log(5), lam=0.3, seed=SEED, name="B")
SCEN_D = SimScenario(n_c=60, delta=math.log(1.25), lam=0.1, monotonicity="deterministic", seed=SEED, name="D")


def study_a():
    return study("A", SCEN_A, ("glmm",))


def study_b():
    return study("B", SCEN_B, ("glmm", "glm"))


def test_criterion_1_table2_null_effect():
    tab = study_a()
    ssw, psw = tab.row("SSW", "glmm"), tab.row("PSW", "glmm")
    per = tab.timing["per_dataset"]
    checks = {
        "mean SSW": abs(ssw.mean_estimate - 1.567) <= 0.01,
        "mean PSW": abs(psw.mean_estimate - 1.564) <= 0.01,
        "SSW coverage": 0.93 <= ssw.coverage <= 0.97,
        "avg var": abs(ssw.avg_model_var - 0.027) <= 0.005,
        "time": per < 3.0,
    }
    ok = all(checks.values())
    detail = (f"mean SSW {ssw.mean_estimate:.4f} (1.567+-0.01), mean PSW {psw.mean_estimate:.4f} (1.564+-0.01), "
              f"SSW coverage {ssw.coverage:.3f} [0.93,0.97], avg var {ssw.avg_model_var:.4f} (0.027+-0.005), "
              f"{per:.3f} s/dataset (<3)")
    report(1, ok, detail, mean_ssw=ssw.mean_estimate, mean_psw=psw.mean_estimate, coverage_ssw=ssw.coverage,
           avg_var_ssw=ssw.avg_model_var, emp_var_ssw=ssw.emp_var, bias_ssw=ssw.bias, bias_psw=psw.bias,
           seconds_per_dataset=per, n_failed=ssw.n_failed)
    assert ok, {k: v for k, v in checks.items() if not v}


def test_criterion_2_attenuation_regime():
    tab = study_b()
    mar, con = tab.row("SSW", "glm"), tab.row("SSW", "glmm")
    checks = {
        "marginal bias sign": mar.bias < 0,
        "marginal |bias|": 0.04 <= abs(mar.bias) <= 0.08,
        "marginal coverage": mar.coverage <= 0.91,
        "conditional |bias|": abs(con.bias) <= 0.03,
        "conditional coverage": con.coverage >= 0.92,
    }
    ok = all(checks.values())
    detail = (f"marginal SSW bias {mar.bias:+.4f} (neg, |.| in [0.04,0.08]), coverage {mar.coverage:.3f} (<=0.91); "
              f"conditional bias {con.bias:+.4f} (|.|<=0.03), coverage {con.coverage:.3f} (>=0.92)")
    report(2, ok, detail, marginal_bias=mar.bias, marginal_coverage=mar.coverage, conditional_bias=con.bias,
           conditional_coverage=con.coverage, n_failed_conditional=con.n_failed, n_failed_marginal=mar.n_failed)
    assert ok, {k: v for k, v in checks.items() if not v}


def test_criterion_3_sandwich_vs_bootstrap():
    reps, boot_reps = 200, 250
    sc = SimScenario(n_c=60, delta=0.0, lam=0.1, seed=SEED, name="S4")
    mspec = ModelSpec("glmm")
    sand = {"SSW": [], "PSW": []}
    boot = {"SSW": [], "PSW": []}
    t_sand = t_boot = 0.0
    for rep in range(reps):
        data, _ = simulate_dataset(sc, rep)
        t0 = time.perf_counter()
        model = mspec.fit(data)
        t_fit = time.perf_counter() - t0
        t0 = time.perf_counter()
        for e in estimate(data, model, "both", VarianceConfig("sandwich")):
            sand[e.estimator].append(e.variance)
        t_sand += t_fit + time.perf_counter() - t0
        t0 = time.perf_counter()
        res = cluster_bootstrap(data, mspec, "both", BootstrapConfig(boot_reps, seed=rep), init=model)
        t_boot += t_fit + time.perf_counter() - t0
        for k in boot:
            boot[k].append(res.summaries[k].variance)
    rel = {k: abs(np.mean(sand[k]) - np.mean(boot[k])) / np.mean(boot[k]) for k in sand}
    ratio = t_sand / t_boot
    ok = all(r <= 0.20 for r in rel.values()) and ratio <= 0.1
    detail = ("; ".join(f"{k} avg sandwich {np.mean(sand[k]):.5f} vs bootstrap {np.mean(boot[k]):.5f} "
                        f"(rel {rel[k]:.3f} <= 0.20)" for k in sand)
              + f"; time ratio {ratio:.4f} (<= 0.1)")
    report(3, ok, detail, avg_sandwich={k: float(np.mean(v)) for k, v in sand.items()},
           avg_bootstrap={k: float(np.mean(v)) for k, v in boot.items()}, relative_gap=rel,
           seconds_sandwich=t_sand / reps, seconds_bootstrap=t_boot / reps)
    assert ok


def test_criterion_4_estimator_crossover():
    a, b = study_a(), study_b()
    gap_a = abs(a.row("PSW", "glmm").bias - a.row("SSW", "glmm").bias)
    gap_b = abs(b.row("SSW", "glmm").bias - b.row("PSW", "glmm").bias)
    ok = gap_a <= 0.005 and gap_b <= 0.005
    detail = f"|bias PSW - bias SSW| = {gap_a:.5f} at delta=0 and {gap_b:.5f} at delta=log 5 (each <= 0.005)"
    report(4, ok, detail, gap_null=gap_a, gap_monotone=gap_b)
    assert ok


def _oracle_suite():
    out = {}
    rng = np.random.default_rng(2718)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 40))
        X = np.column_stack([np.ones(n), np.full(n, float(rng.integers(0, 2))), rng.normal(2, 0.7, n),
                             rng.normal(0.5, 0.5, n), np.full(n, float(rng.integers(0, 2)))])
        s = (rng.random(n) < 0.7).astype(float)
        beta = np.array([0.75, 0.3, 0.1, -0.05, 0.1]) + rng.normal(0, 0.2, 5)
        s2 = float(rng.uniform(0.05, 2.0))
        I = cluster_integrals(X, s, np.array([0]), np.array([n]), beta, s2, gh_nodes(25))
        ref = seven_integrals_trapezoid(X, s, beta, s2)
        for name, r in zip(("i1", "i2", "i3", "i4", "i5", "i6", "i7"), ref):
            got = np.asarray(getattr(I, name)[0])
            worst = max(worst, float(np.max(np.abs(got - r)) / np.max(np.abs(r))))
    out["a"] = (worst <= 1e-8, f"AGQ vs trapezoid {worst:.2e}")

    d5 = small_trial(n_c=5, seed=11, sizes=(6, 10))
    x = np.array([0.6, 0.4, 0.1, -0.05, 0.1, 0.5])
    fd = fd_gradient(lambda v: loglik_glmm(d5, v[:5], v[5]), x, step=1e-6)
    an = score_glmm(d5, x[:5], x[5])
    r = float(np.max(np.abs(an - fd)) / np.max(np.abs(fd)))
    out["b"] = (r <= 1e-5, f"score vs FD {r:.2e}")

    d10 = small_trial()
    f = model_frame(d10)
    fits = {"conditional": fit_glmm(d10), "marginal": fit_glm(d10)}
    jac, zero = 0.0, 0.0
    for m in fits.values():
        for est, point in (("SSW", estimate_ssw), ("PSW", estimate_psw)):
            e = point(d10, m)
            th = theta_from_fit(m, e.mu1, e.mu0)
            B = outer_matrix(f, th, est, m)
            J = fd_jacobian(lambda v: estimating_functions(f, th.from_array(v), est, m).sum(axis=0),
                            th.to_array(), rel_step=1e-5)
            jac = max(jac, float(np.max(np.abs(B - J)) / np.max(np.abs(J))))
            zero = max(zero, float(np.max(np.abs(estimating_functions(f, th, est, m).sum(axis=0)))))
    out["c"] = (jac <= 1e-3, f"outer matrix vs Jacobian {jac:.2e}")
    out["d"] = (zero <= 1e-6, f"stacked equations at solution {zero:.2e}")

    boundary = None
    for rep in range(12):
        d, _ = simulate_dataset(SimScenario(n_c=20, lam=0.0, delta=0.3, seed=4, size_range=(10, 20)), rep)
        m = fit_glmm(d)
        if m.boundary:
            boundary = float(np.max(np.abs(m.beta - fit_glm(d).beta)))
            break
    out["e"] = (boundary is not None and boundary <= 1e-4, f"boundary vs GLM {boundary}")

    surv = (d10.treatment[d10.cluster_index] == 0) & (d10.survival == 1)
    plain = float(np.mean(d10.outcome[surv]))
    exact = all(estimate_psw(d10, m).mu0 == plain for m in fits.values())
    out["f"] = (exact, f"PSW mu0 exact {exact}")

    rt = max(abs(xi_to_icc(icc_to_xi(lam)) - lam) for lam in (0.05, 0.1, 0.15, 0.3))
    out["g"] = (rt <= 1e-12, f"icc round trip {rt:.1e}")

    gh = max(abs(gh_nodes(n).weights.sum() / math.sqrt(math.pi) - 1) for n in range(1, 101))
    out["h"] = (gh <= 1e-12, f"GH weight sums {gh:.1e}")
    return out


def test_criterion_5_oracle_suite():
    t0 = time.perf_counter()
    out = _oracle_suite()
    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in out.values()) and elapsed < 60
    detail = ", ".join(f"({k}) {'ok' if v[0] else 'FAIL'} {v[1]}" for k, v in out.items()) + f"; {elapsed:.1f} s (<60)"
    report(5, ok, detail, seconds=elapsed)
    assert ok


def test_criterion_6_deterministic_monotonicity():
    tab = study("D", SCEN_D, ("glmm",))
    ssw = tab.row("SSW", "glmm")
    ok = abs(ssw.mean_estimate - 1.562) <= 0.012 and 0.92 <= ssw.coverage <= 0.965
    detail = f"mean SSW {ssw.mean_estimate:.4f} (1.562+-0.012), coverage {ssw.coverage:.3f} [0.92,0.965]"
    report(6, ok, detail, mean_ssw=ssw.mean_estimate, coverage_ssw=ssw.coverage, bias_ssw=ssw.bias,
           n_failed=ssw.n_failed)
    assert ok
