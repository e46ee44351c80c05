"""Parameter checkpoints: named blocks in the shared array container format."""

from ..arrayio import read_container, write_container
from .layers import flatten_params
from .tensor import Tensor

CHECKPOINT_FORMAT = "swarmcoord-checkpoint"


def save_checkpoint(path, params, meta=None):
    """Write a nested parameter tree (dicts of Tensors) plus metadata."""
    flat = {name: t.data for name, t in flatten_params(params).items()}
    write_container(path, flat, meta=meta or {}, fmt=CHECKPOINT_FORMAT)


def load_checkpoint(path):
    """Read back (flat name->Tensor dict, meta). Tensors require gradients."""
    arrays, meta = read_container(path, expect_format=CHECKPOINT_FORMAT)
    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}, meta


def load_into(path, params):
    """Load checkpoint values into an existing parameter tree, shape-checked."""
    arrays, meta = read_container(path, expect_format=CHECKPOINT_FORMAT)
    flat = flatten_params(params)
    if set(arrays) != set(flat):
        missing = set(flat) ^ set(arrays)
        raise ValueError(f"checkpoint blocks do not match model: {sorted(missing)}")
    for name, arr in arrays.items():
        if flat[name].data.shape != arr.shape:
            raise ValueError(f"block {name}: shape {arr.shape} vs {flat[name].data.shape}")
        flat[name].data = arr
    return meta
