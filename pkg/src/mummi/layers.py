"""Parameter registry and the small set of learned function blocks used by the models."""
from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": dm.elu,
    "relu": dm.relu,
    "tanh": dm.tanh,
}


class ParamStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = dm.parameter(data, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def fill_(self, value: float) -> None:
        for p in self._params.values():
            p.data[...] = value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, p in self._params.items():
            h.update(k.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.weight = store.add(f"{name}.w", glorot(rng, n_in, n_out))
        self.bias = store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return dm.linear(x, self.weight, self.bias)


class MLP:
    """Stack of linear layers with an activation between them (none after the last)."""

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: list[int] | tuple[int, ...],
                 n_out: int, rng: np.random.Generator, activation: str = "elu"):
        sizes = [n_in, *hidden, n_out]
        self.layers = [Linear(store, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = ACTIVATIONS[activation]
        self.n_in, self.n_out = n_in, n_out
        self.name = name

    def __call__(self, x) -> Tensor:
        x = dm.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise dm.ShapeError(self.name, x.shape, (self.n_in,))
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class GRUCell:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.w_x = store.add(f"{name}.w_x", np.concatenate([glorot(rng, n_in, n_hidden) for _ in range(3)], axis=1))
        self.w_h = store.add(f"{name}.w_h", np.concatenate(
            [_orthogonal(rng, n_hidden) for _ in range(3)], axis=1))
        self.b_x = store.add(f"{name}.b_x", np.zeros(3 * n_hidden))
        self.b_h = store.add(f"{name}.b_h", np.zeros(3 * n_hidden))

    def __call__(self, x, h) -> Tensor:
        x, h = dm.as_tensor(x), dm.as_tensor(h)
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise dm.ShapeError("gru", x.shape, h.shape)
        return dm.gru_cell(x, h, self.w_x, self.w_h, self.b_x, self.b_h)


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))
