"""Common-weakness transfer attacks on small numpy model zoos.

Submodules: ``numeric`` (budgets, norms), ``models`` (classifiers, ensembles,
quadratic surrogates), ``attacks`` (FGSM through MI-CWA), ``theory``
(numerical checks), ``harness`` (datasets, zoos, campaigns) and ``cli``.
"""

from .attacks import (ATTACKS, AttackConfig, AttackTrace, bim, fgsm, generalized_cwa, mi, mi_cse, mi_cwa,
                      mi_sam, run_attack)
from .harness import (Dataset, DatasetSpec, Zoo, ZooSpec, default_zoo_spec, generate_dataset, run_campaign,
                      sweep, train_zoo)
from .models import MLP, Ensemble, LinearSoftmax, QuadraticModel
from .numeric import PerturbationBudget

__version__ = "0.1.0"

__all__ = [
    "ATTACKS", "AttackConfig", "AttackTrace", "bim", "fgsm", "generalized_cwa", "mi", "mi_cse", "mi_cwa",
    "mi_sam", "run_attack", "Dataset", "DatasetSpec", "Zoo", "ZooSpec", "default_zoo_spec",
    "generate_dataset", "run_campaign", "sweep", "train_zoo", "MLP", "Ensemble", "LinearSoftmax",
    "QuadraticModel", "PerturbationBudget",
]
