# %% [markdown]
# # Attacking a small model zoo
#
# Load the bundled dataset and zoo, attack 200 held-out points with the four
# surrogates, then score the four holdout models. Runs in a few seconds.

# %%
from pathlib import Path

import numpy as np

from cwa_lab import AttackConfig, Dataset, Ensemble, Zoo, run_attack
from cwa_lab.harness import attack_success_rate

ROOT = Path(__file__).resolve().parents[1] / "configs" / "bundled"
data = Dataset.load(ROOT / "data.json")
zoo = Zoo.load(ROOT / "zoo")
_, test = data.split(0.25, 0)
X, y = test.X[:200], test.y[:200]
print(f"{len(data)} points, dim {data.X.shape[1]}, {data.spec.K} classes")

# %% [markdown]
# Logit averaging over the surrogates is the default ensemble. Each attack
# returns a trace with every iterate, the member gradients and the NFE count.

# %%
ens = Ensemble(zoo.surrogates, "logits")
cfg = AttackConfig(seed=0)
for name in ("fgsm", "mi", "mi-sam", "mi-cse", "mi-cwa"):
    tr = run_attack(name, ens, X, y, cfg)
    hold = np.mean([attack_success_rate(tr.x_adv, X, y, m) for m in zoo.holdouts])
    print(f"{name:7s} nfe={tr.nfe:3d}  holdout success={hold:.3f}  "
          f"budget ok={tr.max_budget_violation() <= 1e-12}")

# %% [markdown]
# The CSE inner loop steps through the surrogates one at a time. That tends to
# align their gradients. Watch the mean pairwise cosine along the trajectory.

# %%
from cwa_lab.theory import cosine_trend

for name in ("mi", "mi-cse"):
    trend = cosine_trend(run_attack(name, ens, X, y, cfg))
    print(name, np.round(trend, 3))
