# %% [markdown]
# # What the reverse step does at desk scale
#
# MI-CWA is MI-CSE with a sharpness-aware reverse step in front of the inner
# loop. On this 16-dimensional zoo the reverse step costs a little transfer:
# holdout success drifts down as r grows and meets MI-CSE at r = 0.

# %%
from pathlib import Path

from cwa_lab import AttackConfig, Dataset, Zoo
from cwa_lab.harness import sweep

ROOT = Path(__file__).resolve().parents[1] / "configs" / "bundled"
data = Dataset.load(ROOT / "data.json")
zoo = Zoo.load(ROOT / "zoo")
_, test = data.split(0.25, 0)

eps = 16 / 255
rep = sweep("r", [0.0, eps / 60, eps / 30, eps / 15, eps / 8], AttackConfig(seed=0), zoo, test,
            ["mi-cse", "mi-cwa"], flatness_probes=2, jobs=4)
for row in rep.table():
    print(f"r={row['value']:.4f} {row['attack']:7s} holdout={row['holdout_rate']:.3f} nfe={row['nfe']}")

# %% [markdown]
# The number of outer iterations: MI-CWA with T=5 against MI with T=10.

# %%
rep = sweep("T", [1, 5, 10, 20], AttackConfig(seed=0), zoo, test, ["mi", "mi-cwa"], flatness_probes=2, jobs=4)
for row in rep.table():
    print(f"T={row['value']:2d} {row['attack']:7s} holdout={row['holdout_rate']:.3f}")
