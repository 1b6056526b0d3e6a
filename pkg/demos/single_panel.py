"""Fit the average treatment derivative on one simulated panel.

Walks the library API end to end: simulate a nonseparable panel with two-way
fixed effects and an endogenous treatment, split units into folds, build the
benchmark dictionaries for a preset, and compare the plug-in estimate against
the debiased one at the current-period derivative theta_10(0).

Runs in about twenty seconds.
"""

from panel_dml import (
    DgpSpec,
    EstimandSpec,
    debiased_theta,
    plugin_theta,
    preset_specs,
    simulate_dgp1,
    split_folds,
    true_value,
)

T, S = 10, 0

dgp = DgpSpec("dgp1", n_units=1000, n_periods=T, n_covariates=5, seed=42)
panel = simulate_dgp1(dgp)
partition = split_folds(panel.n_units, k=5, seed=1)
truth = true_value("dgp1", EstimandSpec("point", t=T, s=S))

print(f"panel: {panel.n_units} units x {panel.n_periods} periods, "
      f"{panel.n_covariates} covariates")
print(f"estimand: average d E[Y_t | D, X] / d D_(t-{S}) at t={T}  "
      f"(truth {truth:.2f})\n")

rows = []
for preset in ("GMM", "DGMM", "DPGMM"):
    gamma_spec, riesz_spec, debiased = preset_specs(preset, s=S)
    if debiased:
        report = debiased_theta(panel, partition, T, S, gamma_spec, riesz_spec,
                                base_seed=7)
    else:
        report = plugin_theta(panel, partition, T, S, gamma_spec, base_seed=7)
    rows.append((preset, report))

print(f"{'preset':8} {'estimate':>9} {'std err':>8} {'95% CI':>18} {'covers':>7}")
for preset, report in rows:
    ci = f"[{report.ci_lower:6.3f}, {report.ci_upper:6.3f}]"
    covers = report.ci_lower <= truth <= report.ci_upper
    print(f"{preset:8} {report.point:9.4f} {report.std_error:8.4f} "
          f"{ci:>18} {str(covers):>7}")

print("\nThe unpenalized first stage overfits and its derivative average "
      "lands far from the truth; the debiased estimators correct the "
      "first-stage bias and widen the (previously meaningless) interval "
      "to honest coverage.")
