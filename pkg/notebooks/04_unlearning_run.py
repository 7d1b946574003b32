"""
Unlearning on the toy model
===========================

Forget-set cross-entropy going up means the model forgot; retain-set
cross-entropy staying flat means it kept its utility.
"""

# %%
from mpu.harness.experiment import ExperimentConfig, run_experiment, sweep

cfg = ExperimentConfig(kappa=0.05, m=2)
for mode in ("clean", "mpu", "noised"):
    row = run_experiment(cfg.with_overrides(mode=mode), None).rows[-1]
    print(f"{mode:7s} forget {row.forget_ce:.4f} retain {row.retain_ce:.4f} residual {row.update_residual:.2e}")

# %%
# residual against the clean update: second order for MPU, first order for a single noisy copy
rep = sweep(cfg.with_overrides(wire_dtype="f64"), "kappa", [0.01, 0.02, 0.04, 0.08], out_dir=None)
for mode, fit in rep.fits.items():
    print(mode, "slope", round(fit.slope, 3))
