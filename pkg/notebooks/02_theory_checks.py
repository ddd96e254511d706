# %% [markdown]
# # Numerical checks of the bounds behind the attack
#
# Each study builds instances whose ground truth is known (quadratic members
# with explicit Hessians and optima) and reports pass rates and the worst slack.

# %%
from cwa_lab import theory
from cwa_lab.models import QuadraticModel
import numpy as np

# %% [markdown]
# Per-model bound: (x-p)^T H (x-p) <= ||H||_F ||x-p||^2. With H = I the slack
# is (sqrt(dim) - 1) ||x-p||^2.

# %%
x = np.full(4, 0.7)
r = theory.check_holder_bound([QuadraticModel(np.full(4, 0.5), np.eye(4))], x)
print(r.lhs, r.rhs, r.slack)
print({k: v for k, v in theory.holder_study(1000).items() if k != "expectation_form"})

# %% [markdown]
# The dot-product bound only needs sum(g_i) = 0 in its last step, so it is
# checked at the ensemble optimum; the Cauchy-Schwarz chain holds everywhere.

# %%
rep = theory.dot_product_study(500)
print(rep["chain_pass_rate"], rep["theorem_pass_rate"], rep["optima_reached"])

# %% [markdown]
# Optima drawn from N(c, sigma^2 I): mean squared distance, its growth in
# sigma, and the F-test that orders two spreads.

# %%
g = theory.gaussian_optima_study(theory.GaussianOptimaSpec(4, 16, 1.0), trials=1000)
print(f"E||c-p||^2 = {g.mc_mean:.3f} (expected {g.expected}), grid {np.round(g.grid_means, 3)}")
print(f"F quantile {g.f_quantile:.4f} on {g.f_dof} dof, TPR {g.true_positive_rate:.3f}, "
      f"FPR {g.false_positive_rate:.3f}, Chebyshev coverage {g.chebyshev_coverage:.3f}")

# %% [markdown]
# Flatness and alignment on synthetic ensembles.

# %%
print(theory.cosine_study(200)["pass_rate"])
f = theory.flatness_study(100)
print(f["median_mi"], f["median_mi-cwa"])
