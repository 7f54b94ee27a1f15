"""Reverse-mode differentiation on a linear tape.

The model is a fixed feed-forward pipeline, so no graph framework is
needed: every operation appends one backward closure to a tape, and
`Tape.backward` replays the closures in reverse. Passing `tape=None` to any
op runs the forward math without recording, which is the inference path.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """An array value with a gradient slot filled in during backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=float)
    else:
        t.grad += g


class Tape:
    """Recorded computation list; single-owner, single-threaded."""

    def __init__(self):
        self._steps: list = []

    def record(self, backward_fn) -> None:
        self._steps.append(backward_fn)

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, root: Tensor) -> None:
        """Seed d(root)/d(root) = 1 and propagate through every record."""
        if root.grad is None:
            root.grad = np.ones_like(root.value)
        for fn in reversed(self._steps):
            fn()

    def reset(self) -> None:
        self._steps.clear()


class ParamSet:
    """Named, ordered collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def require_grads(self) -> None:
        missing = [n for n, t in self._params.items() if t.grad is None]
        if missing:
            raise ValueError(f"parameters without gradients: {missing[:5]}")

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            src = np.asarray(arrays[name], dtype=t.value.dtype)
            if src.shape != t.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: have {t.value.shape}, "
                    f"checkpoint {src.shape}"
                )
            t.value = src.copy()

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.value = t.value.astype(dtype)
