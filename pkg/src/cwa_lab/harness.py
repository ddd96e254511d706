"""Synthetic datasets, model zoos, attack campaigns, sweeps and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import ATTACKS, AttackConfig, run_attack
from .models import Classifier, Ensemble, hessian_fnorm_estimate, model_from_dict
from .numeric import mean_pairwise_cosine
from .training import TrainSpec, train_classifier

GENERATORS = ("gaussian_blobs", "concentric_rings", "xor_grid")


class ReportParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data

@dataclass
class DatasetSpec:
    generator: str = "gaussian_blobs"
    dim: int = 16
    K: int = 4
    per_class: int = 300
    noise: float = 0.1
    separation: float = 4.0      # distance between class means, in units of noise
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.per_class < 1 or self.dim < 1:
            raise ValueError("dim and per_class must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.generator == "xor_grid" and self.dim < 2:
            raise ValueError("xor_grid needs dim >= 2")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    spec: DatasetSpec
    means: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def split(self, test_fraction: float = 0.25, seed: int = 0):
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        te, tr = perm[:n_test], perm[n_test:]
        return (Dataset(self.X[tr], self.y[tr], self.spec, self.means),
                Dataset(self.X[te], self.y[te], self.spec, self.means))

    def to_dict(self):
        d = {"spec": asdict(self.spec), "X": self.X.tolist(), "y": self.y.tolist()}
        if self.means is not None:
            d["means"] = self.means.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        means = d.get("means")
        return cls(np.asarray(d["X"], dtype=np.float64), np.asarray(d["y"], dtype=np.int64),
                   DatasetSpec(**d["spec"]), None if means is None else np.asarray(means))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _class_means(spec: DatasetSpec, rng):
    # zero noise keeps the default layout scale so classes stay distinct
    spread = spec.separation * (spec.noise if spec.noise > 0 else 0.1)
    if spec.K == 2:
        u = rng.standard_normal(spec.dim)
        u /= np.linalg.norm(u)
        dirs = np.stack([u, -u]) * (spread / 2)
    elif spec.K <= spec.dim:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.K)))
        dirs = q.T * (spread / np.sqrt(2))   # orthonormal rows are sqrt(2) apart
    else:
        u = rng.standard_normal((spec.K, spec.dim))
        dirs = u / np.linalg.norm(u, axis=1, keepdims=True) * (spread / np.sqrt(2))
    return 0.5 + dirs


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Labelled points in the unit box; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    N = spec.K * spec.per_class
    y = np.repeat(np.arange(spec.K), spec.per_class)
    means = None
    if spec.generator == "gaussian_blobs":
        means = _class_means(spec, rng)
        X = means[y] + spec.noise * rng.standard_normal((N, spec.dim))
    elif spec.generator == "concentric_rings":
        radii = 0.08 + 0.3 * np.arange(spec.K) / max(spec.K - 1, 1)
        u = rng.standard_normal((N, spec.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        X = 0.5 + radii[y, None] * u + spec.noise * 0.1 * rng.standard_normal((N, spec.dim))
    else:
        # class = (row + col) mod K on a K x K grid over the first two coordinates
        cells = rng.integers(0, spec.K, size=(N, 2))
        y = (cells.sum(1) % spec.K).astype(np.int64)
        centers = (cells + 0.5) / spec.K
        X = np.empty((N, spec.dim))
        X[:, :2] = centers + spec.noise * 0.25 / spec.K * rng.standard_normal((N, 2))
        X[:, 2:] = 0.5 + spec.noise * rng.standard_normal((N, spec.dim - 2))
    X = np.clip(X, 0.0, 1.0)
    return Dataset(X, y.astype(np.int64), spec, means)


# ---------------------------------------------------------------------------
# zoo

@dataclass
class ZooSpec:
    members: list = field(default_factory=list)     # list of TrainSpec (or dicts)
    surrogate: list = field(default_factory=list)
    holdout: list = field(default_factory=list)

    def __post_init__(self):
        self.members = [m if isinstance(m, TrainSpec) else TrainSpec(**m) for m in self.members]
        if not self.surrogate or not self.holdout:
            raise ValueError("surrogate and holdout index lists must both be non-empty")
        if set(self.surrogate) & set(self.holdout):
            raise ValueError("surrogate and holdout sets overlap")
        bad = [i for i in (*self.surrogate, *self.holdout) if not 0 <= i < len(self.members)]
        if bad:
            raise ValueError(f"zoo indices out of range: {bad}")

    def to_dict(self):
        return {"members": [m.to_dict() for m in self.members],
                "surrogate": list(self.surrogate), "holdout": list(self.holdout)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_zoo_spec(seed: int = 0, epochs: int = 60) -> ZooSpec:
    """Eight members, architecture diversity from (arch, width, activation, noise)."""
    s = 1000 * seed
    rows = [
        dict(arch="mlp", hidden=32, activation="tanh"),
        dict(arch="linear"),
        dict(arch="mlp", hidden=64, activation="softplus"),
        dict(arch="mlp", hidden=16, activation="tanh", noise_aug=0.1),
        dict(arch="mlp", hidden=32, activation="sigmoid"),
        dict(arch="mlp", hidden=64, activation="tanh"),
        dict(arch="linear", noise_aug=0.1),
        dict(arch="mlp", hidden=16, activation="softplus", noise_aug=0.1),
    ]
    members = [TrainSpec(seed=s + i, epochs=epochs, **r) for i, r in enumerate(rows)]
    return ZooSpec(members, surrogate=[0, 1, 2, 3], holdout=[4, 5, 6, 7])


@dataclass
class Zoo:
    spec: ZooSpec
    models: list

    @property
    def surrogates(self) -> list[Classifier]:
        return [self.models[i] for i in self.spec.surrogate]

    @property
    def holdouts(self) -> list[Classifier]:
        return [self.models[i] for i in self.spec.holdout]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.models):
            name = f"model_{i:02d}.json"
            (d / name).write_text(json.dumps(m.to_dict()))
            files.append(name)
        (d / "zoo.json").write_text(json.dumps({"spec": self.spec.to_dict(), "models": files}))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "zoo.json").read_text())
        models = [model_from_dict(json.loads((d / f).read_text())) for f in meta["models"]]
        return cls(ZooSpec.from_dict(meta["spec"]), models)


def train_zoo(data: Dataset, spec: ZooSpec) -> Zoo:
    K = int(data.spec.K)
    return Zoo(spec, [train_classifier(m, data.X, data.y, K) for m in spec.members])


# ---------------------------------------------------------------------------
# metrics

def attack_success_rate(x_adv, x_nat, y, model: Classifier) -> float:
    """Fraction of initially correct points that the model misclassifies after the attack."""
    y = np.asarray(y)
    ok = model.predict(x_nat) == y
    if not np.any(ok):
        raise ValueError("no eligible points: the model misclassifies every clean input")
    return float(np.mean(model.predict(np.asarray(x_adv)[ok]) != y[ok]))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# campaigns

CSV_COLUMNS = ["attack", "model", "role", "success_rate", "nfe", "cos_initial", "cos_final",
               "flatness"]
SWEEP_COLUMNS = ["parameter", "value", "attack", "holdout_rate", "surrogate_rate", "nfe",
                 "cos_initial", "cos_final", "flatness"]


@dataclass
class CampaignReport:
    rows: list                 # one dict per (attack, model), keys = CSV_COLUMNS
    summary: dict              # per attack: rates, nfe, cosine trend, flatness
    config: dict
    config_hash: str
    wall_time: float = 0.0

    def holdout_rate(self, attack: str) -> float:
        return self.summary[attack]["holdout_rate"]

    def surrogate_rate(self, attack: str) -> float:
        return self.summary[attack]["surrogate_rate"]

    def to_dict(self):
        return {"kind": "campaign", "rows": self.rows, "summary": self.summary,
                "config": self.config, "config_hash": self.config_hash, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d):
        return cls(d["rows"], d["summary"], d["config"], d["config_hash"], d.get("wall_time", 0.0))

    def __eq__(self, other):
        if not isinstance(other, CampaignReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def csv_rows(self):
        return [[r[c] for c in CSV_COLUMNS] for r in self.rows]


def run_campaign(data: Dataset, zoo: Zoo, attacks, cfg: AttackConfig, n_points: int = 200,
                 flatness_probes: int = 8, extra_config: dict | None = None, jobs: int = 1) -> CampaignReport:
    """Attack test points with the surrogate ensemble and score every zoo member.

    Success rates count only points the scored model classifies correctly
    before the attack.  Flatness is the Hessian F-norm estimate of the scored
    model's loss at the adversarial points, averaged over points.
    """
    t0 = time.perf_counter()
    if data.X.shape[1] != zoo.models[0].dim:
        raise ValueError(f"dataset dim {data.X.shape[1]} does not match zoo dim {zoo.models[0].dim}")
    attacks = [a.replace("_", "-").lower() for a in attacks]
    unknown = [a for a in attacks if a not in ATTACKS]
    if unknown:
        raise ValueError(f"unknown attacks {unknown}")
    X = data.X[:n_points]
    y = data.y[:n_points]
    mode = cfg.ensemble_mode or "logits"
    roles = {i: "surrogate" for i in zoo.spec.surrogate} | {i: "holdout" for i in zoo.spec.holdout}

    def one(name):
        # private copies keep the NFE counters of concurrent runs apart
        ens = Ensemble([m.fresh_copy() for m in zoo.surrogates], mode)
        trace = run_attack(name, ens, X, y, cfg.replace(ensemble_mode=mode, record=True))
        cos = mean_pairwise_cosine(np.moveaxis(trace.member_grads, 1, 0))   # (T+1, B)
        cos_trend = cos.mean(axis=-1)
        rows = []
        per_role = {"surrogate": [], "holdout": []}
        flat_role = {"surrogate": [], "holdout": []}
        for i in sorted(roles):
            model = zoo.models[i]
            rate = attack_success_rate(trace.x_adv, X, y, model)
            flat = float(np.mean(hessian_fnorm_estimate(model, trace.x_adv, y, flatness_probes,
                                                        seed=cfg.seed)))
            per_role[roles[i]].append(rate)
            flat_role[roles[i]].append(flat)
            rows.append({"attack": name, "model": i, "role": roles[i], "success_rate": rate,
                         "nfe": trace.nfe, "cos_initial": float(cos_trend[0]),
                         "cos_final": float(cos_trend[-1]), "flatness": flat})
        summary = {
            "holdout_rate": float(np.mean(per_role["holdout"])),
            "surrogate_rate": float(np.mean(per_role["surrogate"])),
            "nfe": trace.nfe,
            "cosine_trend": cos_trend.tolist(),
            "flatness_surrogate": float(np.mean(flat_role["surrogate"])),
            "flatness_holdout": float(np.mean(flat_role["holdout"])),
            "max_budget_violation": trace.max_budget_violation(),
        }
        return rows, summary

    if jobs > 1 and len(attacks) > 1:
        with ThreadPoolExecutor(min(jobs, len(attacks))) as pool:
            results = list(pool.map(one, attacks))
    else:
        results = [one(a) for a in attacks]
    rows, summary = [], {}
    for name, (r, s) in zip(attacks, results):
        rows += r
        summary[name] = s

    config = {
        "dataset": asdict(data.spec),
        "zoo": zoo.spec.to_dict(),
        "attack": cfg.resolved(zoo.models[0].dim) | {"ensemble_mode": mode},
        "attacks": attacks,
        "n_points": int(len(y)),
        "flatness_probes": flatness_probes,
    }
    if extra_config:
        config["extra"] = extra_config
    return CampaignReport(rows, summary, config, config_hash(config), time.perf_counter() - t0)


@dataclass
class SweepReport:
    parameter: str
    grid: list
    reports: list

    def table(self):
        out = []
        for v, rep in zip(self.grid, self.reports):
            for name, s in rep.summary.items():
                out.append({"parameter": self.parameter, "value": v, "attack": name,
                            "holdout_rate": s["holdout_rate"], "surrogate_rate": s["surrogate_rate"],
                            "nfe": s["nfe"], "cos_initial": s["cosine_trend"][0],
                            "cos_final": s["cosine_trend"][-1], "flatness": s["flatness_surrogate"]})
        return out

    def to_dict(self):
        return {"kind": "sweep", "parameter": self.parameter, "grid": list(self.grid),
                "reports": [r.to_dict() for r in self.reports]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["parameter"], d["grid"], [CampaignReport.from_dict(r) for r in d["reports"]])

    def __eq__(self, other):
        if not isinstance(other, SweepReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def csv_rows(self):
        return [[r[c] for c in SWEEP_COLUMNS] for r in self.table()]


SWEEPABLE = ("T", "beta", "r", "alpha", "eps", "mu")


def sweep(parameter: str, grid, base: AttackConfig, zoo: Zoo, data: Dataset, attacks,
          n_points: int = 200, jobs: int = 1, **kw) -> SweepReport:
    """One campaign per grid value of ``parameter``; zoo and data are shared."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {SWEEPABLE}")
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")

    def one(v):
        return run_campaign(data, zoo, attacks, base.replace(**{parameter: v}), n_points, **kw)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            reports = list(pool.map(one, grid))
    else:
        reports = [one(v) for v in grid]
    return SweepReport(parameter, grid, reports)


# ---------------------------------------------------------------------------
# persistence

def save_report(report, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def load_report(path):
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        line = text.splitlines()[err.lineno - 1] if err.lineno - 1 < len(text.splitlines()) else ""
        raise ReportParseError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}: {line[:80]!r}") from err
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "campaign":
            return CampaignReport.from_dict(d)
        if kind == "sweep":
            return SweepReport.from_dict(d)
    except (KeyError, TypeError) as err:
        raise ReportParseError(f"{path}: malformed {kind} report: missing {err}") from err
    raise ReportParseError(f"{path}: not a campaign or sweep report")


def export_csv(report, path) -> int:
    columns = CSV_COLUMNS if isinstance(report, CampaignReport) else SWEEP_COLUMNS
    rows = report.csv_rows()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return len(rows)


# ---------------------------------------------------------------------------
# campaign configuration documents

DEFAULT_ATTACKS = ["mi", "mi-sam", "mi-cse", "mi-cwa"]
CAMPAIGN_KEYS = ("seed", "data", "dataset", "zoo_dir", "zoo", "epochs", "attacks", "attack", "n_points",
                 "test_fraction", "flatness_probes")


def resolve_campaign_config(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults < config file < overrides into one fully resolved document.

    A single ``seed`` feeds the dataset, the default zoo (member seeds
    ``1000*seed + i``), the split and the attack's member ordering, unless the
    file pins those explicitly.
    """
    file_cfg = dict(file_cfg or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(file_cfg) - set(CAMPAIGN_KEYS)
    if unknown:
        raise ValueError(f"unknown campaign config keys: {sorted(unknown)}")
    cfg = {"seed": 0, "data": None, "dataset": {}, "zoo_dir": None, "zoo": None, "epochs": 60,
           "attacks": list(DEFAULT_ATTACKS), "attack": {}, "n_points": 200, "test_fraction": 0.25,
           "flatness_probes": 8}
    cfg.update(file_cfg)
    attack_over = overrides.pop("attack", {})
    cfg.update(overrides)
    seed = int(cfg["seed"])
    cfg["dataset"] = asdict(DatasetSpec(**({"seed": seed} | dict(cfg["dataset"]))))
    cfg["attack"] = AttackConfig.from_dict({"seed": seed} | dict(cfg["attack"]) | attack_over).to_dict()
    if cfg["zoo"] is None and cfg["zoo_dir"] is None:
        cfg["zoo"] = default_zoo_spec(seed, cfg["epochs"]).to_dict()
    cfg["attacks"] = [a.replace("_", "-").lower() for a in cfg["attacks"]]
    return cfg


def prepare_campaign(cfg: dict):
    """Build ``(train, test, zoo)`` from a resolved campaign document."""
    data = Dataset.load(cfg["data"]) if cfg.get("data") else generate_dataset(DatasetSpec(**cfg["dataset"]))
    train, test = data.split(cfg["test_fraction"], cfg["seed"])
    if cfg.get("zoo_dir"):
        zoo = Zoo.load(cfg["zoo_dir"])
    else:
        zoo = train_zoo(train, ZooSpec.from_dict(cfg["zoo"]))
    return train, test, zoo
