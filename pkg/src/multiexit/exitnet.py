"""Multi-exit network data model.

A backbone is a sequence of stages ``f_1 .. f_L``; each stage is a short run
of numcore blocks (typically dense + relu).  The last stage ends in a softmax
and produces the final prediction, so exit ``L`` always exists.  Auxiliary
heads attach after stage ``i`` for ``i`` in the exit set, and an optional
sigmoid gate per head scores how much that exit should be trusted.

Exit indices are 1-based throughout, matching stage numbering.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import (Block, DimensionError, Tensor, block_from_spec, concat, dense,
                      load_checkpoint, relu_block, save_checkpoint, sigmoid,
                      softmax_block)
from .numcore.blocks import avgpool_block

MODEL_FORMAT = "multiexit-model"
MODEL_SCHEMA_VERSION = 1


class PlacementError(ValueError):
    pass


class ExitError(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _run(blocks: list[Block], x: Tensor) -> Tensor:
    for b in blocks:
        x = b(x)
    return x


@dataclass(eq=False)
class Stage:
    blocks: list[Block]

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim

    @property
    def macs(self) -> int:
        return sum(b.macs for b in self.blocks)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        return _run(self.blocks, x)


@dataclass
class HeadSpec:
    """Auxiliary classifier shape: one dense layer, or two with a hidden relu.

    ``pool`` > 1 average-pools the embedding first (cheap dimensionality
    reduction for wide embeddings).
    """

    layers: int = 1
    hidden: int = 16
    pool: int = 1

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise ValueError("head layers must be 1 or 2")


@dataclass(eq=False)
class AuxiliaryHead:
    attach: int
    blocks: list[Block]

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def macs(self) -> int:
        return sum(b.macs for b in self.blocks)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(logits, probabilities)``."""
        logits = _run(self.blocks[:-1], h)
        return logits, self.blocks[-1](logits)

    def __call__(self, h: Tensor) -> Tensor:
        return self.forward(h)[1]


def build_head(attach: int, in_dim: int, num_classes: int, spec: HeadSpec | None = None,
               rng: np.random.Generator | None = None) -> AuxiliaryHead:
    spec = spec or HeadSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    tag = f"head{attach}"
    blocks: list[Block] = []
    width = in_dim
    if spec.pool > 1:
        blocks.append(avgpool_block(width, spec.pool, f"{tag}.pool"))
        width = blocks[-1].out_dim
    if spec.layers == 2:
        blocks += [dense(width, spec.hidden, rng, name=f"{tag}.hidden"),
                   relu_block(spec.hidden, f"{tag}.relu")]
        width = spec.hidden
    blocks += [dense(width, num_classes, rng, name=f"{tag}.out"),
               softmax_block(num_classes, f"{tag}.softmax")]
    return AuxiliaryHead(attach, blocks)


@dataclass(eq=False)
class ExitGate:
    """Sigmoid score in (0, 1) read from ``concat(head logits, h_i)``."""

    attach: int
    block: Block

    @property
    def macs(self) -> int:
        return self.block.macs + 1

    def parameters(self) -> list[Tensor]:
        return self.block.parameters()

    def __call__(self, logits: Tensor, h: Tensor) -> Tensor:
        return sigmoid(self.block(concat([logits, h], axis=-1)))


def build_gate(attach: int, embed_dim: int, num_classes: int,
               rng: np.random.Generator | None = None) -> ExitGate:
    rng = rng if rng is not None else np.random.default_rng(0)
    return ExitGate(attach, dense(num_classes + embed_dim, 1, rng, name=f"gate{attach}"))


@dataclass
class ExitTrace:
    """Everything one forward pass exposes, keyed by exit index."""

    embeddings: dict[int, Tensor]
    logits: dict[int, Tensor]
    predictions: dict[int, Tensor]
    gates: dict[int, Tensor] = field(default_factory=dict)
    chosen_exit: np.ndarray | None = None

    def ordered_predictions(self) -> list[Tensor]:
        return [self.predictions[k] for k in sorted(self.predictions)]


class MultiExitNetwork:
    def __init__(self, stages: list[Stage], heads: list[AuxiliaryHead] | None = None,
                 gates: list[ExitGate] | None = None, num_classes: int | None = None):
        if not stages:
            raise ValueError("backbone needs at least one stage")
        for a, b in zip(stages, stages[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"stage widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.stages = list(stages)
        self.num_classes = num_classes if num_classes is not None else stages[-1].out_dim
        if stages[-1].out_dim != self.num_classes or stages[-1].blocks[-1].kind != "softmax":
            raise ValueError("last stage must end in a softmax over the classes")
        heads = sorted(heads or [], key=lambda h: h.attach)
        validate_placement([h.attach for h in heads], len(stages))
        for h in heads:
            if h.in_dim != self.stages[h.attach - 1].out_dim:
                raise DimensionError(f"head at {h.attach}: input {h.in_dim} "
                                     f"!= stage width {self.stages[h.attach - 1].out_dim}")
            if h.blocks[-1].kind != "softmax" or h.blocks[-1].out_dim != self.num_classes:
                raise ValueError(f"head at {h.attach} must end in a softmax over the classes")
        self.heads = {h.attach: h for h in heads}
        self.gates = {g.attach: g for g in (gates or [])}
        for i in self.gates:
            if i not in self.heads:
                raise ExitError(f"gate at {i} has no head")
        self.stage_evaluations = 0

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def in_dim(self) -> int:
        return self.stages[0].in_dim

    @property
    def exits(self) -> list[int]:
        return sorted(self.heads)

    @property
    def exit_ids(self) -> list[int]:
        """Early exits followed by the final exit ``L``."""
        return self.exits + [self.depth]

    def backbone_parameters(self) -> list[Tensor]:
        return [p for s in self.stages for p in s.parameters()]

    def head_parameters(self) -> list[Tensor]:
        return [p for i in self.exits for p in self.heads[i].parameters()]

    def gate_parameters(self) -> list[Tensor]:
        return [p for i in sorted(self.gates) for p in self.gates[i].parameters()]

    def parameters(self) -> list[Tensor]:
        return self.backbone_parameters() + self.head_parameters() + self.gate_parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, s in enumerate(self.stages, 1):
            for j, b in enumerate(s.blocks):
                for k, p in b.params.items():
                    out[f"stage{i}.{j}.{k}"] = p
        for i in self.exits:
            for j, b in enumerate(self.heads[i].blocks):
                for k, p in b.params.items():
                    out[f"head{i}.{j}.{k}"] = p
        for i in sorted(self.gates):
            for k, p in self.gates[i].block.params.items():
                out[f"gate{i}.{k}"] = p
        return out

    def stage_parameter_groups(self) -> list[list[Tensor]]:
        """Per stage ``i``: the stage plus its co-located head and gate."""
        groups = []
        for i, s in enumerate(self.stages, 1):
            ps = s.parameters()
            if i in self.heads:
                ps += self.heads[i].parameters()
            if i in self.gates:
                ps += self.gates[i].parameters()
            groups.append(ps)
        return groups

    def copy(self) -> "MultiExitNetwork":
        return copy.deepcopy(self)

    def forward_stage(self, i: int, x: Tensor) -> Tensor:
        self.stage_evaluations += 1
        try:
            return self.stages[i - 1](x)
        except DimensionError as exc:
            raise DimensionError(f"stage {i}: {exc}") from exc

    def head_forward(self, i: int, h: Tensor) -> tuple[Tensor, Tensor]:
        try:
            return self.heads[i].forward(h)
        except DimensionError as exc:
            raise DimensionError(f"exit {i}: {exc}") from exc

    def __call__(self, x) -> Tensor:
        return forward_until(self, x, self.depth)


def validate_placement(placement, depth: int) -> list[int]:
    idx = [int(i) for i in placement]
    for i in idx:
        if not 1 <= i <= depth - 1:
            raise PlacementError(f"exit index {i} outside 1..{depth - 1}")
    if len(set(idx)) != len(idx):
        raise PlacementError(f"duplicate exit indices in {idx}")
    if idx != sorted(idx):
        raise PlacementError(f"exit indices must be strictly increasing, got {idx}")
    return idx


def build_backbone(in_dim: int, hidden: int, depth: int, num_classes: int,
                   rng: np.random.Generator | None = None, init: str = "glorot") -> list[Stage]:
    """``depth - 1`` stages of dense+relu at width ``hidden`` and a dense+softmax classifier.

    ``init="near_identity"`` applies to the square hidden stages only.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    stages = []
    width = in_dim
    for i in range(1, depth):
        stage_init = init if (init != "near_identity" or width == hidden) else "glorot"
        stages.append(Stage([dense(width, hidden, rng, stage_init, name=f"stage{i}.dense"),
                             relu_block(hidden, f"stage{i}.relu")]))
        width = hidden
    stages.append(Stage([dense(width, num_classes, rng, name=f"stage{depth}.dense"),
                         softmax_block(num_classes, f"stage{depth}.softmax")]))
    return stages


def attach_exits(backbone, placement, head_spec: HeadSpec | None = None,
                 rng: np.random.Generator | None = None, gates: bool = False,
                 num_classes: int | None = None) -> MultiExitNetwork:
    """Fresh heads (and optionally gates) on top of an existing backbone.

    ``backbone`` is a stage list or a network whose stages are reused as-is;
    parameters are shared, not copied.
    """
    stages = backbone.stages if isinstance(backbone, MultiExitNetwork) else list(backbone)
    C = num_classes if num_classes is not None else stages[-1].out_dim
    idx = validate_placement(placement, len(stages))
    rng = rng if rng is not None else np.random.default_rng(0)
    heads = [build_head(i, stages[i - 1].out_dim, C, head_spec, rng) for i in idx]
    gate_list = [build_gate(i, stages[i - 1].out_dim, C, rng) for i in idx] if gates else []
    return MultiExitNetwork(stages, heads, gate_list, C)


def detach_exits(net: MultiExitNetwork) -> MultiExitNetwork:
    return MultiExitNetwork(net.stages, [], [], net.num_classes)


def add_gates(net: MultiExitNetwork, rng: np.random.Generator | None = None) -> MultiExitNetwork:
    rng = rng if rng is not None else np.random.default_rng(0)
    for i in net.exits:
        if i not in net.gates:
            net.gates[i] = build_gate(i, net.stages[i - 1].out_dim, net.num_classes, rng)
    return net


def build_network(in_dim: int, hidden: int, depth: int, num_classes: int, exits,
                  seed: int = 0, head_spec: HeadSpec | None = None, gates: bool = False,
                  init: str = "glorot") -> MultiExitNetwork:
    rng = np.random.default_rng(seed)
    stages = build_backbone(in_dim, hidden, depth, num_classes, rng, init)
    return attach_exits(stages, exits, head_spec, rng, gates, num_classes)


def forward_all_exits(net: MultiExitNetwork, x) -> ExitTrace:
    """One backbone pass; every embedding feeds its head exactly once."""
    h = _as_tensor(x)
    if h.shape[-1] != net.in_dim:
        raise DimensionError(f"input width {h.shape[-1]} != network input {net.in_dim}")
    emb, logits, preds, gates = {}, {}, {}, {}
    for i in range(1, net.depth):
        h = net.forward_stage(i, h)
        if i in net.heads:
            emb[i] = h
            logits[i], preds[i] = net.head_forward(i, h)
            if i in net.gates:
                gates[i] = net.gates[i](logits[i], h)
    L = net.depth
    last = net.stages[-1]
    net.stage_evaluations += 1
    z = _run(last.blocks[:-1], h)
    emb[L] = h
    logits[L] = z
    preds[L] = last.blocks[-1](z)
    return ExitTrace(emb, logits, preds, gates)


def forward_until(net: MultiExitNetwork, x, stop_exit: int) -> Tensor:
    """Prediction of exit ``stop_exit``, evaluating exactly ``stop_exit`` stages."""
    if stop_exit != net.depth and stop_exit not in net.heads:
        raise ExitError(f"{stop_exit} is not an exit of this network ({net.exit_ids})")
    h = _as_tensor(x)
    if h.shape[-1] != net.in_dim:
        raise DimensionError(f"input width {h.shape[-1]} != network input {net.in_dim}")
    for i in range(1, stop_exit + 1):
        h = net.forward_stage(i, h)
    if stop_exit == net.depth:
        return h
    return net.head_forward(stop_exit, h)[1]


def embeddings(net: MultiExitNetwork, x, upto: int) -> Tensor:
    """Output of stage ``upto`` (no head)."""
    h = _as_tensor(x)
    for i in range(1, upto + 1):
        h = net.forward_stage(i, h)
    return h


# ------------------------------------------------------------- persistence


def describe(net: MultiExitNetwork) -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema_version": MODEL_SCHEMA_VERSION,
        "num_classes": net.num_classes,
        "backbone": [[b.to_spec() for b in s.blocks] for s in net.stages],
        "exits": [{"attach": i, "blocks": [b.to_spec() for b in net.heads[i].blocks]}
                  for i in net.exits],
        "gates": [{"attach": i, "in_dim": net.gates[i].block.in_dim} for i in sorted(net.gates)],
    }


def from_description(desc: dict) -> MultiExitNetwork:
    if desc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model description (format={desc.get('format')!r})")
    if desc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {desc.get('schema_version')}")
    rng = np.random.default_rng(0)
    stages = [Stage([block_from_spec(s, rng, f"stage{i}.{j}") for j, s in enumerate(blocks)])
              for i, blocks in enumerate(desc["backbone"], 1)]
    heads = [AuxiliaryHead(e["attach"], [block_from_spec(s, rng, f"head{e['attach']}.{j}")
                                         for j, s in enumerate(e["blocks"])])
             for e in desc["exits"]]
    gates = [ExitGate(g["attach"], dense(g["in_dim"], 1, rng, name=f"gate{g['attach']}"))
             for g in desc.get("gates", [])]
    return MultiExitNetwork(stages, heads, gates, desc["num_classes"])


def save_model(net: MultiExitNetwork, path, meta: dict | None = None) -> Path:
    """Write the description to ``path`` and weights to ``<stem>.ckpt.json`` beside it."""
    path = Path(path)
    ckpt = path.with_name(path.stem + ".ckpt.json")
    desc = describe(net)
    desc["checkpoint"] = ckpt.name
    if meta:
        desc["meta"] = meta
    save_checkpoint(ckpt, {k: p.data for k, p in net.named_parameters().items()})
    path.write_text(json.dumps(desc, indent=1))
    return ckpt


def load_model(path) -> MultiExitNetwork:
    path = Path(path)
    desc = json.loads(path.read_text())
    net = from_description(desc)
    arrays, _ = load_checkpoint(path.parent / desc["checkpoint"])
    named = net.named_parameters()
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks {sorted(missing)}")
    for k, p in named.items():
        if arrays[k].shape != p.shape:
            raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
        p.data = arrays[k].copy()
    return net
