"""Parameter containers and the few layer types the model is built from."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Value

INIT_STD = 0.02


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> dict[str, Value]:
        found: dict[str, Value] = {}
        for attr, obj in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(obj, Value):
                if obj.requires_grad:
                    found[name] = obj
            elif isinstance(obj, Module):
                found.update(obj.named_parameters(name + "."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(obj, dict):
                for key, item in obj.items():
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{name}.{key}."))
        return found

    def parameters(self) -> list[Value]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=dc.DTYPE)
                if arr.shape != p.shape:
                    raise dc.ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
                p.data = arr.copy()


def param(data, name: str | None = None) -> Value:
    return Value(np.array(data, dtype=dc.DTYPE), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = INIT_STD):
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Value:
        y = dc.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x) -> Value:
        return dc.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """Linear -> activation -> Linear, with ReLU or GELU between.

    ``he_init`` draws weights with std ``sqrt(2 / fan_in)``; stacks of plain
    ReLU layers without normalization need it to keep the signal alive.
    """

    def __init__(self, widths, rng: np.random.Generator, activation=dc.relu, he_init: bool = False):
        self.layers = [
            Linear(a, b, rng, std=np.sqrt(2.0 / a) if he_init else INIT_STD)
            for a, b in zip(widths[:-1], widths[1:])
        ]
        self.activation = activation

    def __call__(self, x) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x
