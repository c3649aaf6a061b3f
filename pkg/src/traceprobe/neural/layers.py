"""Network building blocks on top of the autodiff tensors.

All activations flow as row vectors of shape (1, dim).  Every layer exposes
``parameters()`` as an ordered list of (name, Tensor) pairs; the names are
stable across runs and give the serialization order.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, matmul, narrow, relu, sigmoid, tanh


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(xavier_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self):
        return [(f"{self.name}.w", self.weight), (f"{self.name}.b", self.bias)]


class Mlp:
    """Two affine layers with a ReLU between them."""

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        name: str,
    ):
        self.l1 = Linear(in_dim, hidden_dim, rng, f"{name}.l1")
        self.l2 = Linear(hidden_dim, out_dim, rng, f"{name}.l2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(relu(self.l1(x)))

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters()


class LstmCell:
    """Single LSTM cell with merged gate weights (order: i, f, g, o)."""

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator, name: str):
        self.name = name
        self.hidden_dim = hidden_dim
        self.w_ih = Tensor(
            xavier_uniform(rng, in_dim, 4 * hidden_dim), requires_grad=True
        )
        self.w_hh = Tensor(
            xavier_uniform(rng, hidden_dim, 4 * hidden_dim), requires_grad=True
        )
        bias = np.zeros((1, 4 * hidden_dim))
        bias[0, hidden_dim : 2 * hidden_dim] = 1.0  # forget gate starts open
        self.bias = Tensor(bias, requires_grad=True)

    def initial_state(self) -> tuple[Tensor, Tensor]:
        h = Tensor(np.zeros((1, self.hidden_dim)))
        c = Tensor(np.zeros((1, self.hidden_dim)))
        return h, c

    def __call__(
        self, x: Tensor, state: tuple[Tensor, Tensor]
    ) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        gates = matmul(x, self.w_ih) + matmul(h_prev, self.w_hh) + self.bias
        hd = self.hidden_dim
        i = sigmoid(narrow(gates, 0, hd))
        f = sigmoid(narrow(gates, hd, hd))
        g = tanh(narrow(gates, 2 * hd, hd))
        o = sigmoid(narrow(gates, 3 * hd, hd))
        c = f * c_prev + i * g
        h = o * tanh(c)
        return h, c

    def parameters(self):
        return [
            (f"{self.name}.w_ih", self.w_ih),
            (f"{self.name}.w_hh", self.w_hh),
            (f"{self.name}.b", self.bias),
        ]


def row(values) -> Tensor:
    """Constant row-vector tensor of shape (1, n)."""
    arr = np.asarray(values, dtype=np.float64).reshape(1, -1)
    return Tensor(arr)


def concat_rows(tensors) -> Tensor:
    return concat(list(tensors), axis=1)
