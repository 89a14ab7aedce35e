"""The layer zoo: dense, relu, softmax-output, identity (plus avg-pool reduction)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, avg_pool, matmul, relu, softmax

KINDS = ("dense", "relu", "softmax", "identity", "avgpool")


@dataclass(eq=False)
class Block:
    kind: str
    in_dim: int
    out_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)
    name: str = ""
    window: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"block {self.name or self.kind}: dims must be positive")

    def __call__(self, x: Tensor) -> Tensor:
        return forward_block(self, x)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def macs(self) -> int:
        """Static operation count: in*out for dense, out_dim for activations."""
        if self.kind == "dense":
            return self.in_dim * self.out_dim
        if self.kind in ("relu", "softmax"):
            return self.out_dim
        if self.kind == "avgpool":
            return self.in_dim
        return 0

    def to_spec(self) -> dict:
        spec = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "avgpool":
            spec["window"] = self.window
        return spec


def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


def dense(in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
          init: str = "glorot", name: str = "") -> Block:
    """Affine block ``x @ W + b``.

    ``init="near_identity"`` (square only) starts from ``I`` plus small
    noise, which lets a freshly added stage reproduce its input.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if init == "glorot":
        w = glorot_uniform(rng, in_dim, out_dim)
    elif init == "near_identity":
        if in_dim != out_dim:
            raise ValueError("near_identity init needs a square dense block")
        w = np.eye(in_dim) + 1e-3 * glorot_uniform(rng, in_dim, out_dim)
    elif init == "zeros":
        w = np.zeros((in_dim, out_dim))
    else:
        raise ValueError(f"unknown init {init!r}")
    params = {
        "weight": Tensor(w, requires_grad=True, name=f"{name}.weight"),
        "bias": Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias"),
    }
    return Block("dense", in_dim, out_dim, params, name)


def relu_block(dim: int, name: str = "") -> Block:
    return Block("relu", dim, dim, name=name)


def softmax_block(dim: int, name: str = "") -> Block:
    return Block("softmax", dim, dim, name=name)


def identity(dim: int, name: str = "") -> Block:
    return Block("identity", dim, dim, name=name)


def avgpool_block(in_dim: int, window: int, name: str = "") -> Block:
    if in_dim % window:
        raise ValueError(f"avgpool: width {in_dim} not divisible by {window}")
    return Block("avgpool", in_dim, in_dim // window, name=name, window=window)


def forward_block(block: Block, x: Tensor) -> Tensor:
    if x.shape[-1] != block.in_dim:
        raise DimensionError(
            f"block {block.name or block.kind!r} expects last dim {block.in_dim}, got {x.shape}")
    if block.kind == "dense":
        return matmul(x, block.params["weight"]) + block.params["bias"]
    if block.kind == "relu":
        return relu(x)
    if block.kind == "softmax":
        return softmax(x)
    if block.kind == "avgpool":
        return avg_pool(x, block.window)
    return x


def block_from_spec(spec: dict, rng: np.random.Generator | None = None, name: str = "") -> Block:
    kind = spec["kind"]
    if kind == "dense":
        return dense(spec["in_dim"], spec["out_dim"], rng, spec.get("init", "glorot"), name)
    if kind == "relu":
        return relu_block(spec["in_dim"], name)
    if kind == "softmax":
        return softmax_block(spec["in_dim"], name)
    if kind == "identity":
        return identity(spec["in_dim"], name)
    if kind == "avgpool":
        return avgpool_block(spec["in_dim"], spec["window"], name)
    raise ValueError(f"unknown block kind {kind!r}")
