"""Parameter containers: a minimal module tree with stable dotted names."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import BatchNormState, Tensor, batch_norm


class Module:
    """Walks instance attributes in definition order.

    Tensors with ``requires_grad`` are parameters, :class:`BatchNormState`
    objects contribute running-stat buffers, and lists of modules named
    ``xs`` expand to ``x0``, ``x1``, ...
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                stem = name[:-1] if name.endswith("s") else name
                for i, v in enumerate(value):
                    yield f"{stem}{i}", v
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{name}.running_mean", value.running_mean
                yield f"{prefix}{name}.running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in state]
        if missing:
            raise KeyError(f"missing entries in state: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                value.running_mean = np.asarray(state[f"{prefix}{name}.running_mean"], dtype=value.running_mean.dtype).copy()
                value.running_var = np.asarray(state[f"{prefix}{name}.running_var"], dtype=value.running_var.dtype).copy()
            elif isinstance(value, Module):
                value._load_buffers(state, f"{prefix}{name}.")


def param(rng: np.random.Generator, shape, scale: float | None = None, dtype=np.float32) -> Tensor:
    """Gaussian init with std ``scale`` (default 1/sqrt(fan_in))."""
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones(channels, dtype)
        self.beta = zeros(channels, dtype)
        self.stats = BatchNormState(channels, momentum, eps, dtype)

    def __call__(self, x: Tensor, residual: Tensor | None = None, relu: bool = False) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, self.training, residual, relu)
