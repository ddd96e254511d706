"""Mini-batch gradient descent for the zoo classifiers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .models import MLP, Classifier, LinearSoftmax, log_softmax


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSpec:
    arch: str = "mlp"            # "linear" or "mlp"
    hidden: int = 32
    activation: str = "tanh"
    seed: int = 0
    epochs: int = 60
    lr: float = 0.1
    batch_size: int = 64
    weight_decay: float = 0.0
    noise_aug: float = 0.0       # std of Gaussian input noise, the desk-scale "robust" member
    init_scale: float = 4.0      # first-layer init gain; inputs vary on a ~0.1 scale
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def build_classifier(spec: TrainSpec, dim: int, n_classes: int, rng) -> Classifier:
    if spec.arch == "linear":
        return LinearSoftmax.init(dim, n_classes, rng)
    if spec.arch == "mlp":
        return MLP.init(dim, n_classes, spec.hidden, rng, spec.activation, spec.init_scale)
    raise ValueError(f"unknown architecture {spec.arch!r}")


def _param_grads(model, X, Y):
    """Mean cross-entropy and its parameter gradients on a batch."""
    B = X.shape[0]
    if isinstance(model, LinearSoftmax):
        z = X @ model.W.T + model.b
    else:
        a, h = model.forward_cache(X)
        z = h @ model.W2.T + model.b2
    lsm = log_softmax(z)
    ce = -np.mean(lsm[np.arange(B), Y])
    dz = np.exp(lsm)
    dz[np.arange(B), Y] -= 1.0
    dz /= B
    if isinstance(model, LinearSoftmax):
        return ce, {"W": dz.T @ X, "b": dz.sum(0)}
    da = (dz @ model.W2) * model._dact(a)
    return ce, {"W1": da.T @ X, "b1": da.sum(0), "W2": dz.T @ h, "b2": dz.sum(0)}


def train_classifier(spec: TrainSpec, X, y, n_classes: int | None = None) -> Classifier:
    """Train a classifier with plain mini-batch gradient descent.

    Deterministic given ``spec.seed``.  The returned model carries
    ``train_meta`` with the final loss and training accuracy.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set must be a non-empty N x D array")
    if y.shape != (X.shape[0],):
        raise ValueError("one label per training point required")
    K = int(y.max()) + 1 if n_classes is None else n_classes
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"labels must lie in [0, {K})")

    rng = np.random.default_rng(spec.seed)
    model = build_classifier(spec, X.shape[1], K, rng)
    N = X.shape[0]
    bs = min(spec.batch_size, N)
    ce = float("nan")
    for epoch in range(spec.epochs):
        order = rng.permutation(N)
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            xb = X[idx]
            if spec.noise_aug > 0:
                xb = xb + spec.noise_aug * rng.standard_normal(xb.shape)
            ce, grads = _param_grads(model, xb, y[idx])
            if not np.isfinite(ce):
                raise TrainingDiverged(f"training loss became non-finite in epoch {epoch}")
            params = model.params()
            new = {k: params[k] - spec.lr * (grads[k] + spec.weight_decay * params[k]) for k in params}
            if not all(np.all(np.isfinite(v)) for v in new.values()):
                raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
            model.set_params(**new)

    acc = float(np.mean(model.predict(X) == y))
    model.seed = spec.seed
    model.train_meta = {"epochs": spec.epochs, "final_batch_loss": float(ce), "train_accuracy": acc,
                        "spec": spec.to_dict()}
    return model
