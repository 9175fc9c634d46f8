"""Parameter tables and the dense layers built on them."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_mlp(rng: np.random.Generator, prefix: str, widths: Sequence[int]) -> dict[str, np.ndarray]:
    """Weights ``{prefix}.{i}.w`` / ``.b`` for consecutive widths; biases start at zero."""
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}.{i}.w"] = glorot(rng, a, b)
        params[f"{prefix}.{i}.b"] = np.zeros(b, dtype=np.float32)
    return params


def bind(graph: Graph, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    return {name: graph.tensor(v, requires_grad=trainable, name=name) for name, v in params.items()}


def linear(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add_bias(T.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str, depth: int, final_relu: bool = True) -> Tensor:
    """``depth`` linear layers with relu between them (and after the last if ``final_relu``)."""
    for i in range(depth):
        x = linear(x, p, f"{prefix}.{i}")
        if i < depth - 1 or final_relu:
            x = T.relu(x)
    return x


def collect_grads(grads: T.GradientMap, bound: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in bound.items()}
