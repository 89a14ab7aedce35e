"""Trace-driven latency simulation of a multi-exit network split over computation tiers.

Stages are assigned to tiers in order.  Each head runs on the tier of the
stage it is attached to.  A sample crossing a tier boundary pays the link
latency plus the time to ship the boundary embedding.  There is no queueing
or contention: samples are simulated independently.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .io import write_csv


class TopologyError(ValueError):
    pass


class Tier(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    compute_rate: float = Field(gt=0)       # MACs per ms
    energy_coeff: float = Field(default=1.0, ge=0)


class Link(BaseModel):
    model_config = ConfigDict(extra="forbid")

    latency: float = Field(ge=0)            # ms
    bandwidth: float = Field(gt=0)          # bytes per ms; inf means instantaneous


class TierTopology(BaseModel):
    """Tiers, the links between consecutive tiers, and a stage -> tier map.

    ``partition[k]`` is the tier of stage ``k + 1``.
    """

    model_config = ConfigDict(extra="forbid")

    tiers: list[Tier]
    links: list[Link] = []
    partition: list[int]
    bytes_per_value: float = Field(default=4.0, gt=0)

    @field_validator("partition")
    @classmethod
    def _monotone(cls, v):
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError("partition must be nondecreasing in stage index")
        return v

    def check(self, depth: int) -> None:
        if len(self.links) != len(self.tiers) - 1:
            raise TopologyError(f"{len(self.tiers)} tiers need {len(self.tiers) - 1} links, "
                                f"got {len(self.links)}")
        if len(self.partition) != depth:
            raise TopologyError(f"partition covers {len(self.partition)} stages, network has {depth}")
        if any(not 0 <= t < len(self.tiers) for t in self.partition):
            raise TopologyError("partition refers to an unknown tier")


def load_topology(path) -> TierTopology:
    return TierTopology.model_validate(json.loads(Path(path).read_text()))


@dataclass
class NetShape:
    """What the simulator needs from a network: per-stage MACs and widths, per-exit head MACs."""

    stage_macs: list[float]
    stage_out: list[int]
    head_macs: dict[int, float]
    exit_ids: list[int]

    @classmethod
    def of(cls, net, evaluated_heads: Sequence[int] | None = None) -> "NetShape":
        heads = net.exits if evaluated_heads is None else list(evaluated_heads)
        return cls([float(s.macs) for s in net.stages], [s.out_dim for s in net.stages],
                   {i: float(net.heads[i].macs) for i in heads}, net.exit_ids)


@dataclass
class SimReport:
    exit_index: np.ndarray
    latency: np.ndarray               # ms per sample
    link_values: np.ndarray           # values sent over each link, summed over samples
    link_time: np.ndarray             # per-sample communication time (ms)
    tier_macs: np.ndarray             # MACs executed per tier
    tier_busy: np.ndarray             # ms of compute per tier
    energy: np.ndarray                # per tier
    exit_costs: np.ndarray            # incremental cost per exit, communication included
    mean_cost: float
    percentiles: dict[str, float] = field(default_factory=dict)

    @property
    def mean_latency(self) -> float:
        return math.fsum(self.latency) / len(self.latency)

    @property
    def utilization(self) -> np.ndarray:
        total = self.tier_busy.sum()
        return self.tier_busy / total if total > 0 else np.zeros_like(self.tier_busy)

    def summary(self) -> dict:
        return {"mean_latency": self.mean_latency, **self.percentiles,
                "mean_cost": self.mean_cost,
                "link_values": self.link_values.tolist(),
                "utilization": self.utilization.tolist(),
                "energy": self.energy.tolist()}


def _step_costs(shape: NetShape, topo: TierTopology):
    """Compute and link time of each stage step and each head, in ms."""
    part = topo.partition
    compute = np.array([m / topo.tiers[part[k]].compute_rate for k, m in enumerate(shape.stage_macs)])
    # communication paid before stage k+1 when it lives on a later tier than stage k
    comm = np.zeros(len(part))
    hops = [[] for _ in part]
    for k in range(1, len(part)):
        for t in range(part[k - 1], part[k]):
            link = topo.links[t]
            v = shape.stage_out[k - 1]
            comm[k] += link.latency + v * topo.bytes_per_value / link.bandwidth
            hops[k].append(t)
    head = {i: m / topo.tiers[part[i - 1]].compute_rate for i, m in shape.head_macs.items()}
    return compute, comm, hops, head


def simulate(shape: NetShape, topo: TierTopology, exit_index: Sequence[int]) -> SimReport:
    """Replay per-sample exit decisions through the topology.

    A sample exiting at ``k`` runs stages ``1..k``, every evaluated head
    attached before or at ``k``, and every link between the tiers of those stages.
    """
    L = len(shape.stage_macs)
    topo.check(L)
    ex = np.asarray(exit_index, dtype=np.int64)
    if ex.size == 0:
        raise ValueError("empty exit trace")
    if np.any(~np.isin(ex, shape.exit_ids)):
        raise ValueError("exit trace refers to an unknown exit")
    compute, comm, hops, head = _step_costs(shape, topo)
    part = np.asarray(topo.partition)
    nt = len(topo.tiers)

    # per-exit totals; samples exiting at the same place behave identically
    eps = []
    prev = 0
    for j in shape.exit_ids:
        seg = float(compute[prev:j].sum() + comm[prev:j].sum())
        if j in head:
            seg += head[j]
        eps.append(seg)
        prev = j
    eps = np.asarray(eps)
    gamma = np.cumsum(eps)
    pos = np.searchsorted(shape.exit_ids, ex)
    latency = gamma[pos]

    link_values = np.zeros(len(topo.links))
    link_time = np.zeros(len(ex))
    tier_macs = np.zeros(nt)
    tier_busy = np.zeros(nt)
    counts = np.bincount(pos, minlength=len(shape.exit_ids))
    for p, j in enumerate(shape.exit_ids):
        c = counts[p]
        if c == 0:
            continue
        link_time[pos == p] = comm[:j].sum()
        for k in range(j):
            t = part[k]
            tier_macs[t] += c * shape.stage_macs[k]
            tier_busy[t] += c * compute[k]
            for hop in hops[k]:
                link_values[hop] += c * shape.stage_out[k - 1]
        for i, m in shape.head_macs.items():
            if i <= j and i < L:
                t = part[i - 1]
                tier_macs[t] += c * m
                tier_busy[t] += c * head[i]
    energy = tier_macs * np.array([t.energy_coeff for t in topo.tiers])
    pct = {f"p{q}": float(np.percentile(latency, q)) for q in (50, 95, 99)}
    return SimReport(ex, latency, link_values, link_time, tier_macs, tier_busy, energy, eps,
                     math.fsum(latency) / len(latency), pct)


def single_tier(shape: NetShape, rate: float) -> TierTopology:
    return TierTopology(tiers=[Tier(name="local", compute_rate=rate)], links=[],
                        partition=[0] * len(shape.stage_macs))


def compare_partitions(shape: NetShape, topologies: dict[str, TierTopology],
                       exit_index: Sequence[int]) -> list[tuple[str, SimReport]]:
    """Simulate each candidate on the same trace; rank by mean latency, then p95, then name."""
    if len(topologies) < 2:
        raise ValueError("need at least two candidate partitions")
    runs = [(name, simulate(shape, topo, exit_index)) for name, topo in topologies.items()]
    return sorted(runs, key=lambda r: (r[1].mean_latency, r[1].percentiles["p95"], r[0]))


def write_report(report: SimReport, path) -> Path:
    rows = [(k, int(e), float(lat), float(c))
            for k, (e, lat, c) in enumerate(zip(report.exit_index, report.latency, report.link_time))]
    return write_csv(path, ["sample", "exit", "latency_ms", "link_ms"], rows)
