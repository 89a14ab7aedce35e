from .blocks import (Block, avgpool_block, block_from_spec, dense, forward_block,
                     identity, relu_block, softmax_block)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import ParamGroup, SgdOptimizer, inverse_time, param_hash
from .tensor import (ContractError, DimensionError, Tensor, backward, concat,
                     cross_entropy, log, matmul, no_grad, relu, sigmoid, softmax,
                     zero_grad)

__all__ = [
    "Block", "CheckpointError", "ContractError", "DimensionError", "ParamGroup",
    "SgdOptimizer", "Tensor", "avgpool_block", "backward", "block_from_spec", "concat",
    "cross_entropy", "dense", "forward_block", "identity", "inverse_time",
    "load_checkpoint", "log", "matmul", "no_grad", "param_hash", "relu", "relu_block",
    "save_checkpoint", "sigmoid", "softmax", "softmax_block", "zero_grad",
]
