"""
Zero-sum noise across copies
============================
"""

# %%
import numpy as np

from mpu.noisegen import build_plan, draw, empirical_covariance_check
from mpu.tensorcore import ParamSet

cur = ParamSet({"w": np.linspace(-1, 1, 6)})
plan = build_plan(kappa=0.1, m=3, alpha=None, current=cur, reference=cur * 0.0)
print("alpha", plan.alpha, "sigma", plan.sigma)

# %%
d = draw(plan, 1, 42)
for k, eps in enumerate(d.base, 1):
    print(k, np.round(eps["w"], 4))
print("sum over copies", sum(e["w"] for e in d.base))

# %%
# the copies are pairwise anti-correlated with rank m - 1
rep = empirical_covariance_check(plan, 10_000, seed=0)
print("variance error", rep.variance_error, "rank", rep.empirical_rank)
print(np.round(rep.covariance_ratio, 3))
