"""End-to-end experiment pipeline driven by one JSON config.

Stages run in a fixed order (data, place, train, calibrate, infer, simulate,
diagnose); each one writes its artifacts into the run directory and then
refreshes ``manifest.json``.  Wall-clock values live only in ``timings.json``
and the ``wall_time`` column of ``history.csv``; everything else is
bit-identical across reruns.
"""
from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path
from typing import Literal

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .data import (SyntheticDataset, generate_mixture_dataset, generate_separable_dataset,
                   load_tabular_dataset, write_dataset_csv)
from .diagkit import ib_plane, write_ib_points
from .exitnet import HeadSpec, build_network, save_model
from .inferkit import (ExitPolicy, calibrate_single_threshold, calibrate_thresholds_per_exit,
                       overthinking_report, run_adaptive_inference)
from .io import write_csv
from .placekit import (exhaustive_placement, greedy_placement, measure_exit_fractions,
                       percentile_placement, static_cost_profile, write_profile)
from .tiersim import NetShape, TierTopology, simulate, write_report
from .trainkit import TrainingConfig, train

STAGES = ("data", "place", "train", "calibrate", "infer", "simulate", "diagnose")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Strict):
    generator: Literal["mixture", "separable", "file"] = "mixture"
    n: int = Field(10000, ge=2)
    easy_fraction: float = Field(0.8, ge=0, le=1)
    num_classes: int = Field(4, ge=2)
    dim: int = Field(2, ge=1)
    margin: float = 0.5
    path: str | None = None


class ModelSpec(_Strict):
    hidden: int = Field(32, ge=1)
    depth: int = Field(6, ge=1)
    head_layers: int = Field(1, ge=1, le=2)
    head_hidden: int = Field(16, ge=1)
    head_pool: int = Field(1, ge=1)
    gates: bool = False
    init: Literal["glorot", "near_identity"] = "glorot"


class PlacementSpec(_Strict):
    strategy: Literal["fixed", "greedy", "exhaustive", "percentile"] = "fixed"
    exits: list[int] = [1, 3]
    th: float = Field(0.7, ge=0, le=1)
    percentiles: list[float] = [1 / 3, 2 / 3]
    max_exits: int | None = None
    probe_beta: float = Field(0.5, ge=0, le=1)
    probe_epochs: int = Field(5, ge=1)


class PolicySpec(_Strict):
    kind: Literal["entropy_threshold", "max_confidence", "learned_gate", "always_final",
                  "fixed_exit"] = "entropy_threshold"
    calibration: Literal["per_exit", "single", "none"] = "per_exit"
    beta: float | list[float] = 0.5
    budget: float = Field(0.01, ge=0)
    target_accuracy: float | None = None
    cutoff: float = 0.5
    exit: int | None = None


class DiagnosticsSpec(_Strict):
    ibplane: bool = True
    bins: int = Field(16, ge=2)


class ExperimentConfig(_Strict):
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    placement: PlacementSpec = PlacementSpec()
    training: TrainingConfig = TrainingConfig()
    policy: PolicySpec = PolicySpec()
    topology: TierTopology | None = None
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    stages: list[Literal["data", "place", "train", "calibrate", "infer", "simulate",
                         "diagnose"]] = list(STAGES)
    seed: int = 0
    output_dir: str = "run"

    def resolved(self) -> dict:
        """Every field, defaults included, as plain JSON."""
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.model_validate(json.loads(Path(path).read_text()))
    return cfg.model_copy(update={"seed": seed}) if seed is not None else cfg


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def make_dataset(spec: DatasetSpec, seed: int) -> SyntheticDataset:
    if spec.generator == "file":
        if not spec.path:
            raise ValueError("dataset.path is required for generator 'file'")
        return load_tabular_dataset(spec.path, seed, spec.num_classes)
    if spec.generator == "separable":
        ds = generate_separable_dataset(spec.n, seed, spec.dim, spec.margin)
    else:
        ds = generate_mixture_dataset(spec.n, spec.easy_fraction, spec.num_classes, seed,
                                      dim=max(spec.dim, 2))
    return ds.split(seed)


class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.state: dict = {}
        self.artifacts: dict[str, list[str]] = {}
        self.timings: dict[str, float] = {}

    # -- helpers
    def head_spec(self) -> HeadSpec:
        m = self.cfg.model
        return HeadSpec(m.head_layers, m.head_hidden, m.head_pool)

    def build(self, exits):
        ds = self.state["dataset"]
        m = self.cfg.model
        return build_network(ds.X.shape[1], m.hidden, m.depth, ds.num_classes, exits,
                             seed=self.cfg.seed, head_spec=self.head_spec(), gates=m.gates,
                             init=m.init)

    def training_config(self, **update) -> TrainingConfig:
        return self.cfg.training.model_copy(update={"seed": self.cfg.seed, **update})

    def need(self, key: str, stage: str):
        if key not in self.state:
            raise RuntimeError(f"{stage} needs {key!r}; enable the stage that produces it")
        return self.state[key]

    # -- stages
    def data(self):
        ds = make_dataset(self.cfg.dataset, self.cfg.seed)
        self.state["dataset"] = ds
        write_dataset_csv(ds, self.out / "dataset.csv")
        rows = [(name, int(k)) for name, idx in ds.splits.items() for k in idx]
        write_csv(self.out / "splits.csv", ["split", "row"], rows)
        return ["dataset.csv", "splits.csv"]

    def place(self):
        spec = self.cfg.placement
        ds = self.need("dataset", "place")
        L = self.cfg.model.depth
        if spec.strategy == "fixed":
            self.state["exits"] = list(spec.exits)
            write_csv(self.out / "placement.csv", ["index", "rule", "lhs", "kept"],
                      [(i, "fixed", "", i in spec.exits) for i in range(1, L)])
            return ["placement.csv"]
        probe = self.build(list(range(1, L)))
        if spec.strategy == "percentile":
            profile = static_cost_profile(probe)
            exits = percentile_placement(profile, spec.percentiles)
            rows = [(i, "percentile", "", i in exits) for i in range(1, L)]
        else:
            X, y = ds.train
            train(probe, X, y, self.training_config(strategy="joint", epochs=spec.probe_epochs))
            Xv, _ = ds.validation
            reach = measure_exit_fractions(probe, ExitPolicy("entropy_threshold",
                                                             spec.probe_beta), Xv)
            profile = static_cost_profile(probe).with_reach(reach)
            if spec.strategy == "greedy":
                plan = greedy_placement(profile, spec.th)
            else:
                plan = exhaustive_placement(profile, spec.max_exits)
            rows = [(d["index"], d["rule"], "" if d["lhs"] is None else d["lhs"], d["kept"])
                    for d in plan.decisions]
            exits = plan.exits
        self.state["exits"] = exits
        write_profile(profile, self.out / "profile.csv")
        write_csv(self.out / "placement.csv", ["index", "rule", "lhs", "kept"], rows)
        return ["profile.csv", "placement.csv"]

    def train(self):
        ds = self.need("dataset", "train")
        exits = self.state.get("exits", list(self.cfg.placement.exits))
        net = self.build(exits)
        X, y = ds.train
        result = train(net, X, y, self.training_config())
        self.state["net"] = net
        self.timings["train_wall_time"] = result.history[-1].get("wall_time", 0.0) \
            if result.history else 0.0
        rows = []
        for rec in result.history:
            if "loss" not in rec:
                continue
            for i in sorted(rec["loss"]):
                rows.append((rec["epoch"], i, rec["loss"][i], rec["accuracy"][i],
                             rec["wall_time"]))
        write_csv(self.out / "history.csv", ["epoch", "exit", "loss", "accuracy", "wall_time"],
                  rows)
        save_model(net, self.out / "model.json")
        return ["history.csv", "model.json", "model.ckpt.json"]

    def calibrate(self):
        ds = self.need("dataset", "calibrate")
        net = self.need("net", "calibrate")
        spec = self.cfg.policy
        Xv, yv = ds.validation
        info: dict = {"method": spec.calibration}
        if spec.kind != "entropy_threshold" or spec.calibration == "none" or not net.exits:
            beta = spec.beta
        elif spec.calibration == "per_exit":
            beta = calibrate_thresholds_per_exit(net, Xv, yv, spec.budget)
            info["budget"] = spec.budget
        else:
            if spec.target_accuracy is None:
                raise ValueError("single-threshold calibration needs policy.target_accuracy")
            res = calibrate_single_threshold(net, Xv, yv, spec.target_accuracy)
            info.update(res.as_dict())
            beta = res.beta
        info["beta"] = beta
        self.state["beta"] = beta
        _dump(self.out / "calibration.json", info)
        return ["calibration.json"]

    def policy(self) -> ExitPolicy:
        spec = self.cfg.policy
        return ExitPolicy(spec.kind, self.state.get("beta", spec.beta), spec.cutoff, spec.exit)

    def infer(self):
        ds = self.need("dataset", "infer")
        net = self.need("net", "infer")
        X, y = ds.test
        res = run_adaptive_inference(net, self.policy(), X)
        base = run_adaptive_inference(net, ExitPolicy("always_final"), X)
        self.state["exit_index"] = res.exit_index
        led = res.ledger
        rows = [(k, e, c, int(p), int(t))
                for (k, e, c), p, t in zip(led.rows(), res.predictions, y)]
        write_csv(self.out / "ledger.csv", ["sample", "exit", "cost", "prediction", "label"], rows)
        ot = overthinking_report(net, X, y)
        metrics = {
            "accuracy": res.accuracy(y),
            "always_final_accuracy": base.accuracy(y),
            "average_cost": led.average_cost,
            "full_cost": base.ledger.average_cost,
            "cost_ratio": led.average_cost / base.ledger.average_cost,
            "exit_ids": net.exit_ids,
            "exit_fraction": led.exit_fraction.tolist(),
            "reach_fraction": led.reach_fraction.tolist(),
            "overthinking_rate": ot.overthinking_rate,
            "correct_early_wrong_final": {str(k): v for k, v in ot.correct_here_wrong_final.items()},
        }
        _dump(self.out / "metrics.json", metrics)
        return ["ledger.csv", "metrics.json"]

    def simulate(self):
        if self.cfg.topology is None:
            return []
        net = self.need("net", "simulate")
        ex = self.need("exit_index", "simulate")
        pol = self.policy()
        shape = NetShape.of(net, [i for i in net.exits if pol.evaluates_head(i)])
        report = simulate(shape, self.cfg.topology, ex)
        write_report(report, self.out / "simulation.csv")
        _dump(self.out / "simulation.json", report.summary())
        return ["simulation.csv", "simulation.json"]

    def diagnose(self):
        if not self.cfg.diagnostics.ibplane:
            return []
        ds = self.need("dataset", "diagnose")
        net = self.need("net", "diagnose")
        X, y = ds.test
        write_ib_points(ib_plane(net, X, y, self.cfg.diagnostics.bins), self.out / "ibplane.csv")
        return ["ibplane.csv"]

    def manifest(self, failed: str | None = None) -> dict:
        return {
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "config": self.cfg.resolved(),
            "versions": {"multiexit": __version__, "numpy": np.__version__,
                         "pydantic": pydantic.VERSION,
                         "python": platform.python_version()},
            "stages": self.artifacts,
            "failed_stage": failed,
        }


def run_experiment(cfg: ExperimentConfig, root: str | Path = ".") -> Path:
    """Run the enabled stages into ``root / cfg.output_dir`` and return that directory."""
    out = Path(root) / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        start = time.perf_counter()
        try:
            run.artifacts[stage] = getattr(run, stage)()
        except Exception as exc:
            _dump(out / "manifest.json", run.manifest(failed=stage))
            raise StageError(stage, exc) from exc
        run.timings[stage] = time.perf_counter() - start
        _dump(out / "manifest.json", run.manifest())
    _dump(out / "timings.json", run.timings)
    return out
