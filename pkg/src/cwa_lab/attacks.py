"""Ensemble transfer attacks: FGSM, BIM, MI, SAM, MI-SAM, CSE, MI-CSE, MI-CWA
and the generalized CWA loop with pluggable optimizers.

Convention: the attacker loss ``log softmax(f(x))_y`` is minimized, so every
"forward" step moves against the gradient and the SAM "reverse" step moves
along it.  Inputs may be a single image ``(D,)`` with an integer label or a
batch ``(B, D)`` with a label per row; a batch is attacked in one run and a
gradient call on the batch counts as one evaluation per member.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .models import Ensemble
from .numeric import (NORM_FLOOR, PerturbationBudget, check_image, clip_linf_box, l1_normalize,
                      l2_normalize)
from .optimizers import NormalizedMomentum, Optimizer, PlainStep, SignMomentum

IMAGENET_DIM = 3 * 224 * 224
PAPER_BETA = 50.0


@dataclass
class AttackConfig:
    """Attack hyperparameters.

    ``alpha``, ``r`` and ``beta`` left as ``None`` resolve to ``eps/5``,
    ``eps/15`` and ``50 * sqrt(D / 150528)``.  The beta rescaling keeps the
    per-coordinate size of a normalized-gradient step equal to the ImageNet
    setting; pass a number to use it verbatim.
    """

    eps: float = 16 / 255
    T: int = 10
    mu: float = 1.0
    alpha: float | None = None
    beta: float | None = None
    r: float | None = None
    box_lo: float = 0.0
    box_hi: float = 1.0
    ensemble_mode: str | None = None
    seed: int = 0
    norm_floor: float = NORM_FLOOR
    reset_inner_momentum: bool = False
    record: bool = True

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        self.T = int(self.T)
        for name in ("eps", "mu", "alpha", "beta", "r", "norm_floor"):
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not self.norm_floor > 0:
            raise ValueError("norm_floor must be positive")

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.eps, self.box_lo, self.box_hi)

    def step_alpha(self) -> float:
        return self.eps / 5 if self.alpha is None else self.alpha

    def step_r(self) -> float:
        return self.eps / 15 if self.r is None else self.r

    def step_beta(self, dim: int) -> float:
        return PAPER_BETA * math.sqrt(dim / IMAGENET_DIM) if self.beta is None else self.beta

    def resolved(self, dim: int) -> dict:
        d = asdict(self)
        d.update(alpha=self.step_alpha(), r=self.step_r(), beta=self.step_beta(dim))
        return d

    def replace(self, **kw) -> "AttackConfig":
        d = asdict(self)
        d.update(kw)
        return AttackConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AttackConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MomentumState:
    m: np.ndarray
    m_hat: np.ndarray

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x), np.zeros_like(x))


@dataclass
class AttackTrace:
    attack: str
    x_nat: np.ndarray
    y: np.ndarray
    iterates: np.ndarray              # (T+1, [B,] D); iterates[0] == x_nat
    nfe: int
    config: dict
    order: list = field(default_factory=list)
    ensemble_losses: np.ndarray | None = None   # (T+1, [B])
    member_losses: np.ndarray | None = None     # (T+1, n, [B])
    member_grads: np.ndarray | None = None      # (T+1, n, [B,] D)

    @property
    def x_adv(self) -> np.ndarray:
        return self.iterates[-1]

    def max_budget_violation(self, eps=None, box_lo=None, box_hi=None) -> float:
        """Largest amount by which any iterate leaves the ball or the box (<= 0 if none)."""
        eps = self.config["eps"] if eps is None else eps
        lo = self.config.get("box_lo", 0.0) if box_lo is None else box_lo
        hi = self.config.get("box_hi", 1.0) if box_hi is None else box_hi
        it = self.iterates
        ball = np.max(np.abs(it - self.x_nat)) - eps
        box = max(np.max(lo - it), np.max(it - hi))
        return float(max(ball, box))

    def to_dict(self, max_iterate_values: int = 100_000) -> dict:
        d = {
            "attack": self.attack,
            "nfe": self.nfe,
            "config": self.config,
            "order": list(self.order),
            "y": np.asarray(self.y).tolist(),
            "x_nat": self.x_nat.tolist(),
            "x_adv": self.x_adv.tolist(),
        }
        if self.ensemble_losses is not None:
            d["ensemble_losses"] = self.ensemble_losses.tolist()
        if self.member_losses is not None:
            d["member_losses"] = self.member_losses.tolist()
        if self.iterates.size <= max_iterate_values:
            d["iterates"] = self.iterates.tolist()
        return d

    def save(self, path, max_iterate_values: int = 100_000):
        Path(path).write_text(json.dumps(self.to_dict(max_iterate_values)))


def expected_nfe(attack: str, T: int, n: int, reverse_step: bool = True) -> int:
    """Member-gradient evaluations an attack spends per run."""
    attack = attack.replace("_", "-").lower()
    if attack == "fgsm":
        return n
    if attack in ("bim", "mi", "mi-cse", "cse"):
        return T * n
    if attack in ("mi-sam", "sam", "mi-cwa", "cwa", "generalized-cwa"):
        return (2 if reverse_step or attack == "generalized-cwa" else 1) * T * n
    raise ValueError(f"no NFE formula for attack {attack!r}")


# ---------------------------------------------------------------------------
# helpers

def _setup(e: Ensemble, x_nat, y, cfg: AttackConfig):
    if cfg.ensemble_mode is not None:
        e = e.with_mode(cfg.ensemble_mode)
    x_nat = check_image(x_nat, cfg.box_lo, cfg.box_hi, "x_nat")
    if x_nat.shape[-1] != e.dim:
        raise ValueError(f"input dim {x_nat.shape[-1]} does not match ensemble dim {e.dim}")
    if y is not None:
        y = np.asarray(y)
    return e, x_nat, y


def _member_order(n: int, seed) -> list[int]:
    # drawn once per run and then held fixed
    return np.random.default_rng(seed).permutation(n).tolist()


def _finish(name, e, x_nat, y, iterates, nfe, config, order=()):
    it = np.stack(iterates)
    trace = AttackTrace(name, x_nat, y, it, nfe, config, list(order))
    if config.get("record", True):
        flat_pts = it.reshape(-1, it.shape[-1])
        yy = None if y is None else np.broadcast_to(y, it.shape[:-1]).reshape(-1)
        losses, grads = e.member_losses_and_grads(flat_pts, yy, count=False)
        n = len(e)
        trace.member_losses = np.moveaxis(losses.reshape((n,) + it.shape[:-1]), 0, 1)
        trace.member_grads = np.moveaxis(grads.reshape((n,) + it.shape), 0, 1)
        ens = np.asarray(e.loss(flat_pts, yy))
        trace.ensemble_losses = ens.reshape(it.shape[:-1])
    return trace


# ---------------------------------------------------------------------------
# attacks

def fgsm(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """One signed step of size eps against the ensemble gradient."""
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    start = e.eval_counter
    _, g = e.loss_and_grad(x_nat, y)
    x1 = clip_linf_box(x_nat - cfg.eps * np.sign(g), x_nat, cfg.budget)
    return _finish("fgsm", e, x_nat, y, [x_nat, x1], e.eval_counter - start, cfg.resolved(e.dim))


def bim(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    alpha = cfg.step_alpha()
    start = e.eval_counter
    x = x_nat
    its = [x]
    for _ in range(cfg.T):
        _, g = e.loss_and_grad(x, y)
        x = clip_linf_box(x - alpha * np.sign(g), x_nat, cfg.budget)
        its.append(x)
    return _finish("bim", e, x_nat, y, its, e.eval_counter - start, cfg.resolved(e.dim))


def mi(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """Momentum iterative method: accumulate l1-normalized gradients, step by sign."""
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    alpha = cfg.step_alpha()
    start = e.eval_counter
    x = x_nat
    m = np.zeros_like(x_nat)
    its = [x]
    for _ in range(cfg.T):
        _, g = e.loss_and_grad(x, y)
        m = cfg.mu * m + l1_normalize(g, cfg.norm_floor)
        x = clip_linf_box(x - alpha * np.sign(m), x_nat, cfg.budget)
        its.append(x)
    return _finish("mi", e, x_nat, y, its, e.eval_counter - start, cfg.resolved(e.dim))


def sam_step(e: Ensemble, x_t, x_nat, y, cfg: AttackConfig, forward_step: float | None = None):
    """Reverse (ascent) step of size r, then a signed descent step from there.

    Returns ``(x_r, x_f)``.  The descent step defaults to ``alpha``.  With
    ``r == 0`` the reverse gradient is skipped and ``x_r`` is ``x_t``.
    """
    if cfg.ensemble_mode is not None:
        e = e.with_mode(cfg.ensemble_mode)
    x_t = np.asarray(x_t, dtype=np.float64)
    x_nat = np.asarray(x_nat, dtype=np.float64)
    yy = y
    r = cfg.step_r()
    step = cfg.step_alpha() if forward_step is None else forward_step
    if r > 0:
        _, g = e.loss_and_grad(x_t, yy)
        x_r = clip_linf_box(x_t + r * np.sign(g), x_nat, cfg.budget)
    else:
        x_r = x_t
    _, g = e.loss_and_grad(x_r, yy)
    x_f = clip_linf_box(x_r - step * np.sign(g), x_nat, cfg.budget)
    return x_r, x_f


def mi_sam(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """MI-SAM: momentum over the SAM displacement ``x_f - x_t``.

    The SAM descent step uses ``beta`` and the outer move is ``alpha * m``
    without a sign; MI-CWA differs here and signs its outer momentum.
    """
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    alpha, beta = cfg.step_alpha(), cfg.step_beta(e.dim)
    start = e.eval_counter
    x = x_nat
    m = np.zeros_like(x_nat)
    its = [x]
    for _ in range(cfg.T):
        _, x_f = sam_step(e, x, x_nat, y, cfg, forward_step=beta)
        m = cfg.mu * m + (x_f - x)
        x = clip_linf_box(x + alpha * m, x_nat, cfg.budget)
        its.append(x)
    return _finish("mi_sam", e, x_nat, y, its, e.eval_counter - start, cfg.resolved(e.dim))


def sam(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """Plain SAM under the l-inf geometry: every iterate is the SAM forward point."""
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    start = e.eval_counter
    x = x_nat
    its = [x]
    for _ in range(cfg.T):
        _, x = sam_step(e, x, x_nat, y, cfg)
        its.append(x)
    return _finish("sam", e, x_nat, y, its, e.eval_counter - start, cfg.resolved(e.dim))


def cse_inner_loop(e: Ensemble, x_t, x_nat, y, cfg: AttackConfig, state: MomentumState,
                   order=None) -> np.ndarray:
    """Sequential per-member descent with l2-normalized gradients.

    Updates ``state.m_hat`` in place (it persists across outer iterations)
    and returns the point after the last member.
    """
    beta = cfg.step_beta(e.dim)
    order = range(len(e)) if order is None else order
    yy = y
    x = x_t
    for i in order:
        member = e.members[i]
        _, g = member.loss_and_grad(x, yy)
        state.m_hat = cfg.mu * state.m_hat + l2_normalize(g, cfg.norm_floor)
        x = clip_linf_box(x - beta * state.m_hat, x_nat, cfg.budget)
    return x


def _mi_cse_family(name, e, x_nat, y, cfg, reverse: bool):
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    alpha, r = cfg.step_alpha(), cfg.step_r()
    order = _member_order(len(e), cfg.seed)
    start = e.eval_counter
    state = MomentumState.zeros_like(x_nat)
    x = x_nat
    its = [x]
    for _ in range(cfg.T):
        if cfg.reset_inner_momentum:
            state.m_hat = np.zeros_like(x_nat)
        x0 = x
        if reverse and r > 0:
            _, g = e.loss_and_grad(x, y)
            x0 = clip_linf_box(x + r * np.sign(g), x_nat, cfg.budget)
        x_n = cse_inner_loop(e, x0, x_nat, y, cfg, state, order)
        state.m = cfg.mu * state.m + (x_n - x)
        x = clip_linf_box(x + alpha * np.sign(state.m), x_nat, cfg.budget)
        its.append(x)
    return _finish(name, e, x_nat, y, its, e.eval_counter - start, cfg.resolved(e.dim), order)


def mi_cse(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    return _mi_cse_family("mi_cse", e, x_nat, y, cfg, reverse=False)


def mi_cwa(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """MI-CWA: ensemble reverse step, CSE inner loop, outer sign-momentum step."""
    return _mi_cse_family("mi_cwa", e, x_nat, y, cfg, reverse=True)


def cse(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """CSE without momentum (inner and outer decay set to zero)."""
    return _mi_cse_family("cse", e, x_nat, y, cfg.replace(mu=0.0), reverse=False)


def cwa(e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    """CWA without momentum (inner and outer decay set to zero)."""
    return _mi_cse_family("cwa", e, x_nat, y, cfg.replace(mu=0.0), reverse=True)


def generalized_cwa(e: Ensemble, x_nat, y, budget: PerturbationBudget, T: int,
                    opt_r: Optimizer, opt_beta: Optimizer, opt_alpha: Optimizer, *,
                    seed=0, norm_floor: float = NORM_FLOOR, record: bool = True) -> AttackTrace:
    """Common-weakness loop with three arbitrary optimizers.

    Each outer iteration: reverse step ``opt_r.step(x, -g)`` on the ensemble
    gradient, one ``opt_beta`` step per member on its l2-normalized gradient,
    then ``opt_alpha.step(o, o - x)`` taken from the iteration's starting
    point ``o``.  Every intermediate point is clipped.
    """
    cfg = AttackConfig(eps=budget.eps, T=T, box_lo=budget.box_lo, box_hi=budget.box_hi,
                       seed=seed, norm_floor=norm_floor, record=record)
    e, x_nat, y = _setup(e, x_nat, y, cfg)
    yy = y
    order = _member_order(len(e), seed)
    start = e.eval_counter
    x = x_nat
    its = [x]
    for _ in range(T):
        o = x
        _, g = e.loss_and_grad(x, yy)
        x = clip_linf_box(opt_r.step(x, -g), x_nat, budget)
        for i in order:
            member = e.members[i]
            _, g = member.loss_and_grad(x, yy)
            if not opt_beta.normalizes_input:
                g = l2_normalize(g, norm_floor)
            x = clip_linf_box(opt_beta.step(x, g), x_nat, budget)
        x = clip_linf_box(opt_alpha.step(o, o - x), x_nat, budget)
        its.append(x)
    config = cfg.to_dict()
    config.update(alpha=None, beta=None, r=None, mu=None,
                  optimizers={"r": opt_r.describe(), "beta": opt_beta.describe(),
                              "alpha": opt_alpha.describe()})
    return _finish("generalized_cwa", e, x_nat, y, its, e.eval_counter - start, config, order)


def cwa_optimizers(cfg: AttackConfig, dim: int):
    """The optimizer triple under which the generalized loop reproduces MI-CWA."""
    return (PlainStep(cfg.step_r(), signed=True),
            NormalizedMomentum(cfg.mu, cfg.step_beta(dim), cfg.norm_floor),
            SignMomentum(cfg.mu, cfg.step_alpha()))


ATTACKS = {
    "fgsm": fgsm,
    "bim": bim,
    "mi": mi,
    "mi-sam": mi_sam,
    "mi-cse": mi_cse,
    "mi-cwa": mi_cwa,
    "sam": sam,
    "cse": cse,
    "cwa": cwa,
}


def run_attack(name: str, e: Ensemble, x_nat, y, cfg: AttackConfig) -> AttackTrace:
    key = name.replace("_", "-").lower()
    if key not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}")
    return ATTACKS[key](e, x_nat, y, cfg)
