"""Command-line front end: ``cwa-lab <subcommand> ...``.

Exit codes: 0 success, 1 a check failed or an input file is missing or
malformed, 2 usage error.  Config precedence is flag > file > default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import theory
from .attacks import ATTACKS, AttackConfig, run_attack
from .harness import (SWEEPABLE, Dataset, DatasetSpec, ReportParseError, Zoo, ZooSpec, config_hash,
                      default_zoo_spec, export_csv, generate_dataset, load_report, prepare_campaign,
                      resolve_campaign_config, run_campaign, save_report, sweep, train_zoo)
from .models import Ensemble

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CHECKS = tuple(theory.STUDIES)
# name of each study's size argument, driven by --trials
_TRIAL_ARG = {"holder": "instances", "dot": "instances", "cosine": "instances", "flatness": "instances",
              "gaussian": "trials", "projection": "n_samples"}


class CheckFailed(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _read_json(path, what="config"):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from None


def _parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, payload):
    Path(_parent(path)).write_text(json.dumps(payload, indent=1))


def _announce(config: dict, seed) -> str:
    h = config_hash(config)
    print(f"config_hash={h} seed={seed}")
    return h


def _attack_overrides(args) -> dict:
    names = ("eps", "T", "mu", "alpha", "beta", "r")
    out = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    if getattr(args, "mode", None):
        out["ensemble_mode"] = args.mode
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    spec = _read_json(args.spec, "dataset spec")
    if args.seed is not None:
        spec["seed"] = args.seed
    ds_spec = DatasetSpec(**spec)
    config = {"dataset": asdict(ds_spec)}
    _announce(config, ds_spec.seed)
    ds = generate_dataset(ds_spec)
    ds.save(_parent(args.out))
    print(f"wrote {len(ds)} points to {args.out}")


def cmd_train_zoo(args):
    data = Dataset.load(args.data) if Path(args.data).is_file() else None
    if data is None:
        raise FileNotFoundError(f"dataset file not found: {args.data}")
    seed = data.spec.seed if args.seed is None else args.seed
    spec = ZooSpec.from_dict(_read_json(args.spec, "zoo spec")) if args.spec else default_zoo_spec(seed, args.epochs)
    train, _ = data.split(args.test_fraction, seed)
    config = {"dataset": asdict(data.spec), "zoo": spec.to_dict(), "test_fraction": args.test_fraction,
              "seed": seed}
    _announce(config, seed)
    zoo = train_zoo(train, spec)
    zoo.save(args.out)
    _write_json(Path(args.out) / "train_config.json", config)
    accs = [m.train_meta["train_accuracy"] for m in zoo.models]
    print("train accuracy: " + " ".join(f"{a:.3f}" for a in accs))


def cmd_attack(args):
    file_cfg = _read_json(args.config, "attack config") if args.config else {}
    over = _attack_overrides(args)
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = AttackConfig.from_dict(file_cfg | over)
    zoo = Zoo.load(args.zoo) if (Path(args.zoo) / "zoo.json").is_file() else None
    if zoo is None:
        raise FileNotFoundError(f"no zoo.json in {args.zoo}")
    data = Dataset.load(args.data) if Path(args.data).is_file() else None
    if data is None:
        raise FileNotFoundError(f"dataset file not found: {args.data}")
    _, test = data.split(args.test_fraction, cfg.seed)
    X, y = test.X[:args.points], test.y[:args.points]
    mode = cfg.ensemble_mode or "logits"
    ens = Ensemble(zoo.surrogates, mode)
    config = {"algo": args.algo, "attack": cfg.resolved(ens.dim) | {"ensemble_mode": mode},
              "zoo": zoo.spec.to_dict(), "dataset": asdict(data.spec), "points": int(len(y)),
              "test_fraction": args.test_fraction}
    h = _announce(config, cfg.seed)
    trace = run_attack(args.algo, ens, X, y, cfg.replace(ensemble_mode=mode))
    out = trace.to_dict() | {"resolved_config": config, "config_hash": h, "seed": cfg.seed,
                             "n_surrogates": len(ens), "max_budget_violation": trace.max_budget_violation()}
    _write_json(args.out, out)
    print(f"{args.algo}: nfe={trace.nfe} (n={len(ens)}, T={cfg.T}) -> {args.out}")


def _campaign_config(args):
    file_cfg = _read_json(args.config, "campaign config") if args.config else {}
    over = {"seed": args.seed, "n_points": args.points, "data": args.data, "zoo_dir": args.zoo,
            "attack": _attack_overrides(args)}
    if args.attacks:
        over["attacks"] = [a.strip() for a in args.attacks.split(",") if a.strip()]
    return resolve_campaign_config(file_cfg, over)


def cmd_campaign(args):
    cfg = _campaign_config(args)
    h = _announce(cfg, cfg["seed"])
    _, test, zoo = prepare_campaign(cfg)
    report = run_campaign(test, zoo, cfg["attacks"], AttackConfig.from_dict(cfg["attack"]), cfg["n_points"],
                          cfg["flatness_probes"], extra_config={"resolved": cfg, "resolved_hash": h},
                          jobs=args.jobs)
    save_report(report, _parent(args.out))
    if args.csv:
        export_csv(report, _parent(args.csv))
    for name, s in report.summary.items():
        print(f"{name:7s} holdout={s['holdout_rate']:.3f} surrogate={s['surrogate_rate']:.3f} nfe={s['nfe']}")


def cmd_sweep(args):
    cfg = _campaign_config(args)
    grid = [float(v) if args.param != "T" else int(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise ValueError("empty sweep grid")
    cfg_full = cfg | {"sweep": {"parameter": args.param, "grid": grid}}
    h = _announce(cfg_full, cfg["seed"])
    _, test, zoo = prepare_campaign(cfg)
    rep = sweep(args.param, grid, AttackConfig.from_dict(cfg["attack"]), zoo, test, cfg["attacks"],
                cfg["n_points"], jobs=args.jobs, flatness_probes=cfg["flatness_probes"],
                extra_config={"resolved": cfg_full, "resolved_hash": h})
    save_report(rep, _parent(args.out))
    if args.csv:
        export_csv(rep, _parent(args.csv))
    for row in rep.table():
        print(f"{args.param}={row['value']} {row['attack']:7s} holdout={row['holdout_rate']:.3f}")


def cmd_verify_theory(args):
    names = CHECKS if args.check == "all" else (args.check,)
    config = {"checks": list(names), "trials": args.trials, "seed": args.seed}
    h = _announce(config, args.seed)
    results, failed = [], []
    for name in names:
        kw = {"seed": args.seed}
        if args.trials is not None:
            kw[_TRIAL_ARG[name]] = args.trials
        rep = theory.STUDIES[name](**kw)
        ok = theory.study_passed(rep)
        results.append(rep | {"passed": ok})
        print(f"{name:10s} {'PASS' if ok else 'FAIL'} pass_rate={rep['pass_rate']:.3f} "
              f"worst_slack={rep['worst_slack']:.3g} worst_instance={rep.get('worst_instance')}")
        if not ok:
            failed.append((name, rep.get("worst_instance")))
    payload = {"config": config, "config_hash": h, "seed": args.seed, "results": results,
               "all_passed": not failed}
    if args.out:
        _write_json(args.out, payload)
    if failed:
        raise CheckFailed("; ".join(f"{n} failed, worst instance seed {w}" for n, w in failed))


def cmd_report(args):
    if not Path(args.input).is_file():
        raise FileNotFoundError(f"report file not found: {args.input}")
    rep = load_report(args.input)
    n = export_csv(rep, _parent(args.csv))
    print(f"wrote {n} rows to {args.csv}")


# ---------------------------------------------------------------------------
# parser

def _add_attack_flags(p):
    p.add_argument("--eps", type=float)
    p.add_argument("--T", type=_positive_int)
    p.add_argument("--mu", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--mode", choices=("logits", "loss"), help="ensemble averaging mode")


def _add_campaign_flags(p):
    p.add_argument("--config", help="campaign config JSON")
    p.add_argument("--data", help="dataset JSON (otherwise generated from the config)")
    p.add_argument("--zoo", help="trained zoo directory (otherwise trained from the config)")
    p.add_argument("--attacks", help="comma-separated attack names")
    p.add_argument("--points", type=_positive_int)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    _add_attack_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwa-lab", description="Common-weakness attack lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides config files)")
    common.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker threads (default: available cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-zoo", parents=[common], help="train the model zoo")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", help="zoo spec JSON (default: built-in 8-member zoo)")
    p.add_argument("--epochs", type=_positive_int, default=60)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_zoo)

    p = sub.add_parser("attack", parents=[common], help="run one attack with the zoo's surrogates")
    p.add_argument("--algo", required=True, choices=sorted(ATTACKS))
    p.add_argument("--zoo", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="attack config JSON")
    p.add_argument("--points", type=_positive_int, default=200)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("campaign", parents=[common], help="attack, score and report")
    _add_campaign_flags(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("sweep", parents=[common], help="one campaign per parameter value")
    _add_campaign_flags(p)
    p.add_argument("--param", required=True, choices=SWEEPABLE)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory", parents=[common], help="run numerical theory checks")
    p.add_argument("--check", default="all", choices=CHECKS + ("all",))
    p.add_argument("--trials", type=_positive_int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_theory, seed=0)

    p = sub.add_parser("report", help="render a JSON report as CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)       # exits 2 on usage errors
    try:
        args.func(args)
    except CheckFailed as err:
        print(f"check failed: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (FileNotFoundError, ReportParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, TypeError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
