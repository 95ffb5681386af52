"""Minimal module system: named parameter trees and convolution layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad


class Module:
    """Container whose ``Param`` and ``Module`` attributes form a named tree.

    Attribute assignment order defines parameter order, which in turn fixes
    the checkpoint layout.
    """

    def __init__(self):
        object.__setattr__(self, "_order", [])

    def __setattr__(self, key, value):
        if isinstance(value, (ad.Param, Module, ModuleDict)) and key not in self._order:
            self._order.append(key)
        object.__setattr__(self, key, value)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, ad.Param]]:
        for key in self._order:
            value = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(value, ad.Param):
                yield name, value
            else:
                yield from value.named_params(name + ".")

    def params(self) -> list[ad.Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


class ModuleDict:
    """Ordered string-keyed collection of modules."""

    def __init__(self, items: dict[str, Module] | None = None):
        self._items: dict[str, Module] = dict(items or {})

    def __getitem__(self, key: str) -> Module:
        return self._items[key]

    def __setitem__(self, key: str, value: Module) -> None:
        self._items[key] = value

    def __contains__(self, key) -> bool:
        return key in self._items

    def __iter__(self):
        return iter(self._items)

    def items(self):
        return self._items.items()

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, ad.Param]]:
        for key, module in self._items.items():
            yield from module.named_params(f"{prefix}{key}.")


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.w = ad.Param(_uniform(rng, (cout, cin, k, k), cin * k * k, gain))
        self.b = ad.Param(np.zeros(cout)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Stride-``s`` transposed convolution whose output is exactly ``s`` times larger."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2,
                 gain: float = 1.0):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        fan_in = cin * k * k // (stride * stride)
        self.w = ad.Param(_uniform(rng, (cin, cout, k, k), fan_in, gain))
        self.b = ad.Param(np.zeros(cout))

    def __call__(self, x):
        return ad.conv2d_transpose(x, self.w, self.b, self.stride, self.pad)


class Sequential(Module):
    """Layers applied in order; attention modules may report their masks."""

    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __call__(self, x, masks: list | None = None):
        for layer in self.layers:
            x = layer(x, masks) if hasattr(layer, "attention_mask") else layer(x)
        return x
