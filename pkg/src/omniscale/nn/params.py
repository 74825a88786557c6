"""Named parameter registry and weight initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Flat ``name -> Tensor`` registry with a trainable flag per entry.

    Trainable entries are leaves with ``requires_grad`` set, so a backward
    pass fills their ``.grad``. Frozen entries never receive gradients.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self[name].requires_grad

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if t.requires_grad]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n in self.names(prefix):
            self._entries[n].requires_grad = flag
            if not flag:
                self._entries[n].grad = None

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(self._entries[n].size for n in self.names(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.dtype if dtype is None else dtype)
        for n, t in self._entries.items():
            out.add(n, t.data, trainable=t.requires_grad)
        return out

    def merge(self, other: "ParamStore") -> None:
        """Adopt every entry of ``other`` (names must not collide)."""
        for n, t in other.items():
            self.add(n, t.data, trainable=t.requires_grad)

    def zero_(self, prefix: str) -> None:
        for n in self.names(prefix):
            self._entries[n].data[...] = 0


def init_linear(store: ParamStore, rng: np.random.Generator, name: str, n_in: int, n_out: int,
                zero: bool = False, trainable: bool = True) -> None:
    w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))
    store.add(f"{name}.w", w, trainable)
    store.add(f"{name}.b", np.zeros(n_out), trainable)


def init_conv(store: ParamStore, rng: np.random.Generator, name: str, c_in: int, c_out: int,
              k: int = 3, zero: bool = False, gain: float = 1.0, trainable: bool = True) -> None:
    fan_in = c_in * k * k
    shape = (c_out, c_in, k, k)
    w = np.zeros(shape) if zero else rng.normal(0.0, gain / np.sqrt(fan_in), shape)
    store.add(f"{name}.w", w, trainable)
    store.add(f"{name}.b", np.zeros(c_out), trainable)


def init_norm(store: ParamStore, name: str, channels: int, trainable: bool = True) -> None:
    store.add(f"{name}.gamma", np.ones(channels), trainable)
    store.add(f"{name}.beta", np.zeros(channels), trainable)
