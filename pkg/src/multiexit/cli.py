"""Command-line entry point.

Relative output paths resolve under ``$MULTIEXIT_OUT`` (default: the
current directory).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import pydantic

from .data import DataError, generate_mixture_dataset, load_tabular_dataset, write_dataset_csv
from .diagkit import (convergence_compare, ib_plane, median_iterations, write_convergence,
                      write_ib_points)
from .exitnet import build_network, load_model, save_model
from .experiment import StageError, load_config, run_experiment
from .inferkit import (ExitPolicy, calibrate_single_threshold, calibrate_thresholds_per_exit,
                       run_adaptive_inference)
from .io import read_csv, write_csv
from .placekit import (PlacementRefused, exhaustive_placement, greedy_placement,
                       percentile_placement, read_profile)
from .tiersim import NetShape, TopologyError, load_topology, simulate, write_report
from .trainkit import TrainingConfig, train

OUT_ENV = "MULTIEXIT_OUT"


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def out_path(p: str) -> Path:
    path = Path(p)
    path = path if path.is_absolute() else out_root() / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _dataset(args):
    ds = load_tabular_dataset(args.data, args.seed if args.seed is not None else 0,
                              getattr(args, "classes", None))
    return ds


def _policy(args) -> ExitPolicy:
    beta = args.beta
    if isinstance(beta, list) and len(beta) == 1:
        beta = beta[0]
    kind = "entropy_threshold" if args.policy == "entropy" else args.policy
    return ExitPolicy(kind, beta, exit=args.exit)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args):
    ds = generate_mixture_dataset(args.n, args.easy_fraction, args.classes,
                                  args.seed or 0, dim=args.dim)
    path = out_path(args.out)
    write_dataset_csv(ds, path)
    _emit({"path": str(path), **ds.meta})


def cmd_place(args):
    profile = read_profile(args.profile)
    if args.strategy == "percentile":
        _emit({"strategy": "percentile", "exits": percentile_placement(profile, args.percentiles)})
        return
    if profile.reach is None:
        raise ValueError(f"{args.profile}: column I is required for {args.strategy} placement")
    if args.strategy == "greedy":
        plan = greedy_placement(profile, args.th)
    else:
        plan = exhaustive_placement(profile, args.max_exits)
    if args.out:
        write_csv(out_path(args.out), ["index", "rule", "lhs", "kept"],
                  [(d["index"], d["rule"], "" if d["lhs"] is None else d["lhs"], d["kept"])
                   for d in plan.decisions])
    _emit({"strategy": plan.strategy, "exits": plan.exits, "th": plan.th,
           "expected_cost": plan.cost, "decisions": plan.decisions})


def cmd_train(args):
    ds = _dataset(args)
    cfg = TrainingConfig()
    if args.config:
        cfg = TrainingConfig.model_validate(json.loads(Path(args.config).read_text()))
    update = {k: v for k, v in (("strategy", args.strategy), ("epochs", args.epochs),
                                ("lr", args.lr), ("seed", args.seed)) if v is not None}
    cfg = cfg.model_copy(update=update)
    net = build_network(ds.X.shape[1], args.hidden, args.depth, ds.num_classes, args.exits,
                        seed=cfg.seed, gates=args.gates)
    X, y = ds.train
    result = train(net, X, y, cfg)
    path = out_path(args.out)
    save_model(net, path, {"training": json.loads(cfg.model_dump_json())})
    last = result.history[-1] if result.history else {}
    _emit({"model": str(path), "iterations": result.iterations,
           "accuracy": {str(k): v for k, v in last.get("accuracy", {}).items()}})


def cmd_calibrate(args):
    ds = _dataset(args)
    net = load_model(args.model)
    Xv, yv = ds.validation
    if args.target is not None:
        _emit(calibrate_single_threshold(net, Xv, yv, args.target).as_dict())
    else:
        _emit({"beta": calibrate_thresholds_per_exit(net, Xv, yv, args.budget),
               "budget": args.budget})


def cmd_infer(args):
    ds = _dataset(args)
    net = load_model(args.model)
    X, y = ds.test
    res = run_adaptive_inference(net, _policy(args), X)
    led = res.ledger
    write_csv(out_path(args.out), ["sample", "exit", "cost", "prediction", "label"],
              [(k, e, c, int(p), int(t)) for (k, e, c), p, t in zip(led.rows(), res.predictions, y)])
    _emit({"accuracy": res.accuracy(y), "average_cost": led.average_cost,
           "exit_ids": net.exit_ids, "exit_fraction": led.exit_fraction.tolist()})


def cmd_simulate(args):
    topo = load_topology(args.topology)
    net = load_model(args.model)
    exits = [int(r["exit"]) for r in read_csv(args.ledger)]
    heads = net.exits if args.policy != "always_final" else []
    report = simulate(NetShape.of(net, heads), topo, exits)
    if args.out:
        write_report(report, out_path(args.out))
    _emit(report.summary())


def cmd_diag(args):
    if args.diag_command == "ibplane":
        ds = _dataset(args)
        net = load_model(args.model)
        X, y = ds.test
        points = ib_plane(net, X, y, args.bins)
        if args.out:
            write_ib_points(points, out_path(args.out))
        _emit([{"exit": p.exit_index, "I_X": p.i_x, "I_Y": p.i_y, "bins": p.bins, "n": p.n}
               for p in points])
        return
    ds = _dataset(args)
    X, y = ds.train
    exits = list(range(1, args.depth))
    configs = {s: TrainingConfig(strategy=s, epochs=args.epochs, lr=args.lr,
                                 base_exit_weight=args.alpha) for s in args.strategies}
    records = convergence_compare(
        lambda s: build_network(X.shape[1], args.hidden, args.depth, ds.num_classes, exits, seed=s),
        X, y, configs, args.target_loss, range(args.seeds))
    if args.out:
        write_convergence(records, out_path(args.out))
    _emit({"target_loss": args.target_loss,
           "iterations": {f"{r.strategy}/{r.seed}": r.iterations_to_target for r in records},
           "median": {s: median_iterations(records, s) for s in args.strategies}})


def cmd_run(args):
    cfg = load_config(args.config, args.seed)
    out = run_experiment(cfg, out_root())
    _emit({"output": str(out), "config_hash": cfg.config_hash()})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiexit", description="Multi-exit network toolkit")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="CSV with features and a final label column")
        sp.add_argument("--classes", type=int, default=None)

    g = sub.add_parser("gen", help="generate an easy/hard mixture dataset")
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--easy-fraction", type=float, default=0.8)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--out", default="dataset.csv")
    g.set_defaults(func=cmd_gen)

    pl = sub.add_parser("place", help="choose exit positions from a cost profile")
    pl.add_argument("--strategy", choices=["greedy", "exhaustive", "percentile"], default="greedy")
    pl.add_argument("--th", type=float, default=0.7)
    pl.add_argument("--profile", required=True)
    pl.add_argument("--max-exits", type=int, default=None)
    pl.add_argument("--percentiles", type=_floats, default=[1 / 3, 2 / 3])
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_place)

    t = sub.add_parser("train", help="train a multi-exit network")
    data_args(t)
    t.add_argument("--config", default=None, help="training config JSON")
    t.add_argument("--strategy", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--depth", type=int, default=6)
    t.add_argument("--exits", type=_ints, default=[1, 3])
    t.add_argument("--gates", action="store_true")
    t.add_argument("--out", default="model.json")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit entropy thresholds on the validation split")
    data_args(c)
    c.add_argument("--model", required=True)
    c.add_argument("--budget", type=float, default=0.01)
    c.add_argument("--target", type=float, default=None, help="single-threshold target accuracy")
    c.set_defaults(func=cmd_calibrate)

    i = sub.add_parser("infer", help="adaptive inference on the test split")
    data_args(i)
    i.add_argument("--model", required=True)
    i.add_argument("--policy", default="entropy_threshold",
                   choices=["entropy", "entropy_threshold", "max_confidence", "learned_gate",
                            "always_final", "fixed_exit"])
    i.add_argument("--beta", type=_floats, default=[0.5])
    i.add_argument("--exit", type=int, default=None)
    i.add_argument("--out", "--report", dest="out", default="ledger.csv")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("simulate", help="replay an exit ledger over computation tiers")
    s.add_argument("--topology", required=True)
    s.add_argument("--ledger", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--policy", default="entropy_threshold")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diag", help="diagnostics")
    dsub = d.add_subparsers(dest="diag_command", required=True)
    cv = dsub.add_parser("convergence", help="paired iterations-to-target comparison")
    data_args(cv)
    cv.add_argument("--strategies", type=lambda s: s.split(","), default=["standard", "joint"])
    cv.add_argument("--depth", type=int, default=8)
    cv.add_argument("--hidden", type=int, default=16)
    cv.add_argument("--epochs", type=int, default=10)
    cv.add_argument("--lr", type=float, default=0.05)
    cv.add_argument("--alpha", type=float, default=0.3)
    cv.add_argument("--target-loss", type=float, default=0.35)
    cv.add_argument("--seeds", type=int, default=5)
    cv.add_argument("--out", default=None)
    ib = dsub.add_parser("ibplane", help="mutual-information plane of exit embeddings")
    data_args(ib)
    ib.add_argument("--model", required=True)
    ib.add_argument("--bins", type=int, default=16)
    ib.add_argument("--out", default=None)
    d.set_defaults(func=cmd_diag)

    r = sub.add_parser("run", help="run a full experiment from a config file")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, TopologyError, PlacementRefused, ValueError, FileNotFoundError,
            pydantic.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
