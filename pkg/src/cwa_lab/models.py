"""Differentiable classifiers with exact input gradients.

The attacker loss is ``log softmax(f(x))_y``; attacks *minimize* it.  All
classifiers accept a single input ``(D,)`` or a batch ``(B, D)``.

Each call to :meth:`Classifier.loss_and_grad` is one gradient evaluation and
bumps ``eval_counter`` by exactly one, whatever the batch size.  This is the
unit used for NFE accounting.
"""

from __future__ import annotations

import copy
import json
import threading
from pathlib import Path

import numpy as np

from .numeric import DimensionMismatch, as_vec


class NoLogits(TypeError):
    """Raised when logits are requested from a pure loss surface."""


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _labels(y, batch_shape, n_classes):
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"class labels must be integers, got {y.dtype}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"class label out of range [0, {n_classes})")
    return np.broadcast_to(y, batch_shape)


class Classifier:
    """Base class: subclasses provide ``logits`` and ``_logits_vjp``."""

    arch = "abstract"

    def __init__(self, dim: int, n_classes: int | None):
        self.dim = int(dim)
        self.n_classes = n_classes
        self._evals = 0
        self._lock = threading.Lock()

    @property
    def eval_counter(self) -> int:
        return self._evals

    def _tick(self):
        with self._lock:
            self._evals += 1

    def fresh_copy(self) -> "Classifier":
        """Independent copy with its own evaluation counter reset to zero."""
        clone = copy.copy(self)
        clone._evals = 0
        clone._lock = threading.Lock()
        return clone

    def _check_x(self, x) -> np.ndarray:
        x = as_vec(x, "x")
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected inputs of dim {self.dim}, got {x.shape[-1]}")
        return x

    def logits(self, x) -> np.ndarray:
        raise NotImplementedError

    def _logits_vjp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Return ``J(x)^T v`` where ``J`` is the logit Jacobian."""
        raise NotImplementedError

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def loss(self, x, y):
        z = self.logits(x)
        y = _labels(y, z.shape[:-1], z.shape[-1])
        out = np.take_along_axis(log_softmax(z), y[..., None], axis=-1)[..., 0]
        return float(out) if out.ndim == 0 else out

    def loss_and_grad(self, x, y, count: bool = True):
        x = self._check_x(x)
        z = self.logits(x)
        y = _labels(y, z.shape[:-1], z.shape[-1])
        lsm = log_softmax(z)
        loss = np.take_along_axis(lsm, y[..., None], axis=-1)[..., 0]
        # d/dz log softmax_y = onehot(y) - softmax(z)
        dz = -np.exp(lsm)
        np.put_along_axis(dz, y[..., None], np.take_along_axis(dz, y[..., None], axis=-1) + 1.0, axis=-1)
        grad = self._logits_vjp(x, dz)
        if count:
            self._tick()
        return (float(loss) if loss.ndim == 0 else loss), grad

    def input_grad(self, x, y, count: bool = True) -> np.ndarray:
        return self.loss_and_grad(x, y, count=count)[1]

    # persistence -------------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "dim": self.dim,
            "K": self.n_classes,
            "params": {k: np.asarray(v).ravel().tolist() for k, v in self.params().items()},
            "shapes": {k: list(np.shape(v)) for k, v in self.params().items()},
            "config": self._config(),
            "seed": getattr(self, "seed", None),
            "train_meta": getattr(self, "train_meta", {}),
        }

    def _config(self) -> dict:
        return {}


class QuadraticModel(Classifier):
    """Pure loss surface ``c + 1/2 (x - p)^T H (x - p)``; labels are ignored."""

    arch = "quadratic"

    def __init__(self, p, H, c: float = 0.0):
        p = as_vec(p, "p")
        H = np.asarray(H, dtype=np.float64)
        if H.shape != (p.size, p.size):
            raise DimensionMismatch(f"H must be {p.size}x{p.size}, got {H.shape}")
        if not np.allclose(H, H.T, rtol=0, atol=1e-12):
            raise ValueError("H must be symmetric")
        if np.linalg.eigvalsh(H).min() < -1e-10:
            raise ValueError("H must be positive semidefinite")
        super().__init__(p.size, None)
        self.p = p
        self.H = H
        self.c = float(c)

    def logits(self, x):
        raise NoLogits("a QuadraticModel is a loss surface and has no logits")

    def predict(self, x):
        raise NoLogits("a QuadraticModel cannot classify")

    def loss(self, x, y=None):
        d = self._check_x(x) - self.p
        out = self.c + 0.5 * np.einsum("...i,ij,...j->...", d, self.H, d)
        return float(out) if np.ndim(out) == 0 else out

    def loss_and_grad(self, x, y=None, count: bool = True):
        d = self._check_x(x) - self.p
        grad = d @ self.H
        out = self.c + 0.5 * np.sum(d * grad, axis=-1)
        if count:
            self._tick()
        return (float(out) if np.ndim(out) == 0 else out), grad

    def hessian_fnorm(self) -> float:
        return float(np.linalg.norm(self.H, "fro"))

    def params(self):
        return {"p": self.p, "H": self.H, "c": np.array([self.c])}


def quadratic_loss_grad(m: QuadraticModel, x):
    """Loss and gradient ``H (x - p)`` of a quadratic model (counts one evaluation)."""
    return m.loss_and_grad(x)


def random_quadratic(dim: int, rng: np.random.Generator, *, lam: float = 0.0, scale: float = 1.0,
                     p=None, rank: int | None = None, c: float = 0.0) -> QuadraticModel:
    """Sample ``H = scale * A^T A / rank + lam * I`` with Gaussian ``A``."""
    rank = dim if rank is None else rank
    A = rng.standard_normal((rank, dim))
    H = scale * (A.T @ A) / rank + lam * np.eye(dim)
    H = 0.5 * (H + H.T)
    if p is None:
        p = rng.uniform(0.0, 1.0, size=dim)
    return QuadraticModel(p, H, c)


class LinearSoftmax(Classifier):
    arch = "linear"

    def __init__(self, W, b):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionMismatch("W must be K x D and b must have length K")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite parameters")
        super().__init__(W.shape[1], W.shape[0])
        self.W = W
        self.b = b

    @classmethod
    def init(cls, dim, n_classes, rng, scale=0.1):
        return cls(scale * rng.standard_normal((n_classes, dim)), np.zeros(n_classes))

    def logits(self, x):
        return self._check_x(x) @ self.W.T + self.b

    def _logits_vjp(self, x, v):
        return v @ self.W

    def params(self):
        return {"W": self.W, "b": self.b}

    def set_params(self, W, b):
        self.W, self.b = W, b


_ACTIVATIONS = {
    # name: (f, f')
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda a: 0.5 * (1.0 + np.tanh(0.5 * a))),
    "sigmoid": (lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)),
                lambda a: 0.25 * (1.0 - np.tanh(0.5 * a) ** 2)),
}


class MLP(Classifier):
    """One hidden layer, smooth activation, hand-written backprop."""

    arch = "mlp"

    def __init__(self, W1, b1, W2, b2, activation: str = "tanh"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(_ACTIVATIONS)}")
        W1, b1, W2, b2 = (np.asarray(a, dtype=np.float64) for a in (W1, b1, W2, b2))
        if W1.ndim != 2 or W2.ndim != 2 or W2.shape[1] != W1.shape[0]:
            raise DimensionMismatch("W1 must be h x D and W2 must be K x h")
        if b1.shape != (W1.shape[0],) or b2.shape != (W2.shape[0],):
            raise DimensionMismatch("bias shapes do not match weights")
        if not all(np.all(np.isfinite(a)) for a in (W1, b1, W2, b2)):
            raise ValueError("non-finite parameters")
        super().__init__(W1.shape[1], W2.shape[0])
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2
        self.activation = activation
        self._act, self._dact = _ACTIVATIONS[activation]

    @classmethod
    def init(cls, dim, n_classes, hidden, rng, activation="tanh", scale=1.0):
        W1 = scale * rng.standard_normal((hidden, dim)) / np.sqrt(dim)
        W2 = rng.standard_normal((n_classes, hidden)) / np.sqrt(hidden)
        # centre the pre-activations on the middle of the unit box
        b1 = -0.5 * W1.sum(axis=1)
        return cls(W1, b1, W2, np.zeros(n_classes), activation)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def _pre(self, x):
        return x @ self.W1.T + self.b1

    def logits(self, x):
        x = self._check_x(x)
        return self._act(self._pre(x)) @ self.W2.T + self.b2

    def _logits_vjp(self, x, v):
        a = self._pre(x)
        return ((v @ self.W2) * self._dact(a)) @ self.W1

    def forward_cache(self, X):
        a = self._pre(X)
        return a, self._act(a)

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def set_params(self, W1, b1, W2, b2):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2

    def _config(self):
        return {"activation": self.activation, "hidden": self.hidden}


LOSS_AVERAGE = "loss"
LOGITS_AVERAGE = "logits"
ENSEMBLE_MODES = (LOSS_AVERAGE, LOGITS_AVERAGE)


class Ensemble(Classifier):
    """Ordered collection of classifiers combined by loss or logits averaging.

    ``eval_counter`` is the sum of the member counters: one ensemble gradient
    costs ``n`` member evaluations.
    """

    arch = "ensemble"

    def __init__(self, members, mode: str = LOGITS_AVERAGE):
        members = list(members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        if mode not in ENSEMBLE_MODES:
            raise ValueError(f"mode must be one of {ENSEMBLE_MODES}, got {mode!r}")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise DimensionMismatch(f"members disagree on input dim: {sorted(dims)}")
        ks = {m.n_classes for m in members}
        if mode == LOGITS_AVERAGE:
            if any(isinstance(m, QuadraticModel) for m in members):
                raise NoLogits("logits averaging needs members with logits; got a QuadraticModel")
            if len(ks) != 1:
                raise DimensionMismatch(f"members disagree on class count: {sorted(ks)}")
        super().__init__(dims.pop(), ks.pop() if len(ks) == 1 else None)
        self.members = members
        self.mode = mode

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def with_mode(self, mode: str) -> "Ensemble":
        return self if mode == self.mode else Ensemble(self.members, mode)

    @property
    def eval_counter(self) -> int:
        return sum(m.eval_counter for m in self.members)

    def logits(self, x):
        if self.mode != LOGITS_AVERAGE:
            raise NoLogits("logits are only defined for a logits-average ensemble")
        return np.mean([m.logits(x) for m in self.members], axis=0)

    def _logits_vjp(self, x, v):
        return np.mean([m._logits_vjp(x, v) for m in self.members], axis=0)

    def loss(self, x, y=None):
        if self.mode == LOSS_AVERAGE:
            out = np.mean([np.asarray(m.loss(x, y)) for m in self.members], axis=0)
            return float(out) if out.ndim == 0 else out
        return super().loss(x, y)

    def loss_and_grad(self, x, y=None, count: bool = True):
        x = self._check_x(x)
        if self.mode == LOSS_AVERAGE:
            pairs = [m.loss_and_grad(x, y, count=count) for m in self.members]
            loss = np.mean([np.asarray(p[0]) for p in pairs], axis=0)
            grad = np.mean([p[1] for p in pairs], axis=0)
            return (float(loss) if loss.ndim == 0 else loss), grad
        z = self.logits(x)
        y = _labels(y, z.shape[:-1], z.shape[-1])
        lsm = log_softmax(z)
        loss = np.take_along_axis(lsm, y[..., None], axis=-1)[..., 0]
        dz = -np.exp(lsm)
        np.put_along_axis(dz, y[..., None], np.take_along_axis(dz, y[..., None], axis=-1) + 1.0, axis=-1)
        grad = np.mean([m._logits_vjp(x, dz) for m in self.members], axis=0)
        if count:
            for m in self.members:
                m._tick()
        return (float(loss) if loss.ndim == 0 else loss), grad

    def member_losses_and_grads(self, x, y, count: bool = False):
        pairs = [m.loss_and_grad(x, y, count=count) for m in self.members]
        return np.array([np.asarray(p[0]) for p in pairs]), np.array([p[1] for p in pairs])


def attack_loss(c: Classifier, x, y):
    """``log softmax(f(x))_y`` -- the quantity the attacker drives down."""
    return c.loss(x, y)


def ensemble_loss_and_grad(e: Ensemble, x, y):
    return e.loss_and_grad(x, y)


def finite_diff_grad(c: Classifier, x, y, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``c.loss`` at a single point ``x``."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = as_vec(x, "x")
    if x.ndim != 1:
        raise ValueError("finite_diff_grad expects a single point")
    E = h * np.eye(x.size)
    f_plus = np.asarray(c.loss(x + E, np.full(x.size, y) if y is not None else None))
    f_minus = np.asarray(c.loss(x - E, np.full(x.size, y) if y is not None else None))
    return (f_plus - f_minus) / (2.0 * h)


def hessian_fnorm_estimate(c: Classifier, x, y, n_probes: int = 64, seed=0, h: float = 1e-4):
    """Estimate ``||H||_F`` of the loss at ``x`` from Hessian-vector probes.

    Uses ``||H||_F^2 = E ||H v||^2`` for standard normal ``v``; each ``H v`` is a
    central difference of the input gradient.  Batched ``x`` gives one
    estimate per row.  Gradient calls here are not counted as attack NFEs.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    x = as_vec(x, "x")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    B, D = X.shape
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_probes, D))
    pts = X[:, None, :] + h * V[None, :, :]
    pts_m = X[:, None, :] - h * V[None, :, :]
    yy = None
    if y is not None:
        yy = np.repeat(np.broadcast_to(np.asarray(y), (B,)), n_probes)
    _, g_plus = c.loss_and_grad(pts.reshape(-1, D), yy, count=False)
    _, g_minus = c.loss_and_grad(pts_m.reshape(-1, D), yy, count=False)
    Hv = ((g_plus - g_minus) / (2.0 * h)).reshape(B, n_probes, D)
    est = np.sqrt(np.mean(np.sum(Hv ** 2, axis=-1), axis=-1))
    return float(est[0]) if single else est


# ---------------------------------------------------------------------------
# persistence

def model_from_dict(d: dict) -> Classifier:
    params = {k: np.asarray(v, dtype=np.float64).reshape(d["shapes"][k]) for k, v in d["params"].items()}
    arch = d["arch"]
    if arch == "linear":
        m = LinearSoftmax(params["W"], params["b"])
    elif arch == "mlp":
        m = MLP(params["W1"], params["b1"], params["W2"], params["b2"], d["config"]["activation"])
    elif arch == "quadratic":
        m = QuadraticModel(params["p"], params["H"], float(params["c"][0]))
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    m.seed = d.get("seed")
    m.train_meta = d.get("train_meta", {})
    return m


def save_model(model: Classifier, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> Classifier:
    return model_from_dict(json.loads(Path(path).read_text()))
