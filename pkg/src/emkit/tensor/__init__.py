"""Dense tensors, seeded randomness and a minimal reverse-mode tape."""
from emkit.tensor.core import Tensor, as_tensor, resolve_dtype, seeded_tensor, validate
from emkit.tensor.io import load_array, load_tensor, read_meta, save_tensor
from emkit.tensor.ops import matmul, softmax_rows
from emkit.tensor.tape import Tape, current_tape, grad_check, no_record

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "current_tape",
    "grad_check",
    "load_array",
    "load_tensor",
    "matmul",
    "no_record",
    "read_meta",
    "resolve_dtype",
    "save_tensor",
    "seeded_tensor",
    "softmax_rows",
    "validate",
]
