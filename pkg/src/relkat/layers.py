"""Small parameterized building blocks used by the model components."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NONLINEARITIES: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": ad.tanh,
    "relu": ad.relu,
}


class Linear:
    """Affine map ``x @ w + b`` with Gaussian fan-in initialization."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class Mlp:
    """Stack of Linear layers with a pointwise nonlinearity between them.

    The final layer is linear; ``depth`` counts Linear layers, so ``depth=2``
    is Linear -> nonlinearity -> Linear.
    """

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        depth: int = 2,
        nonlinearity: str = "tanh",
    ):
        if depth < 1:
            raise ValueError(f"depth must be at least 1, got {depth}")
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.nonlinearity = nonlinearity
        dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        act = NONLINEARITIES[self.nonlinearity]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.{i}")
