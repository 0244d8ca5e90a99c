import numpy as np

from .tensor import Tensor, get_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(get_dtype())


def param(arr, requires_grad: bool = False, name: str | None = None) -> Tensor:
    t = Tensor(arr, requires_grad=requires_grad)
    t.name = name
    return t
