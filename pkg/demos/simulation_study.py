"""A small Monte-Carlo study in the style of the null-effect simulation.

Runs 100 simulated trials with 30 clusters, no treatment effect on
survival and survival ICC 0.1, fitting both survival models.  Prints the
four performance measures per estimator and model.  The acceptance suite
runs the same design with 1000 replicates.

Run:  python3 demos/simulation_study.py
"""

from crtsace import SimScenario, StudyConfig, run_study


def main():
    scenario = SimScenario(n_c=30, delta=0.0, lam=0.1, seed=11, name="null-effect")
    cfg = StudyConfig(models=("glmm", "glm"))
    table = run_study(scenario, 100, cfg, progress=None)
    print(f"{'estimator':9} {'model':12} {'mean':>7} {'bias':>8} {'emp var':>8} {'avg var':>8} {'cover':>6}")
    for r in table.rows:
        print(f"{r.estimator:9} {r.model:12} {r.mean_estimate:7.4f} {r.bias:+8.4f} {r.emp_var:8.4f} "
              f"{r.avg_model_var:8.4f} {r.coverage:6.3f}")
    print(f"\nfailures per model: {table.failures}; wall clock {table.timing['total']:.1f} s")


if __name__ == "__main__":
    main()
