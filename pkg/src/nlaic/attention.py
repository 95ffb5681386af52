"""Non-local blocks and the non-local attention module (NLAM).

An NLAM has two branches over the same input ``x``::

    main  = ResBlock(ResBlock(ResBlock(x)))
    mask  = sigmoid(Conv1x1(ResBlock^3(NonLocal(x))))
    out   = x + mask * main

The non-local block uses the embedded-Gaussian affinity
``softmax(theta(x)^T phi(x'))`` over key/value positions ``x'``.  With a sparse
factor ``s > 1`` the keys and values come from ``maxpool_s(x)`` while queries
stay at full resolution, so the output keeps the input size and the affinity
matrix shrinks from ``HW x HW`` to ``HW x ceil(H/s)ceil(W/s)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .layers import Conv2d, Module


class ResBlock(Module):
    """``x + conv3x3(relu(conv3x3(x)))``; no normalization layers."""

    def __init__(self, ch: int, rng: np.random.Generator):
        super().__init__()
        self.ch = ch
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.conv2 = Conv2d(ch, ch, 3, rng, gain=0.1)

    def __call__(self, x):
        if x.shape[-3] != self.ch:
            raise ValueError(f"ResBlock built for {self.ch} channels got input {x.shape}")
        return x + self.conv2(ad.relu(self.conv1(x)))


class NonLocalBlock(Module):
    """Embedded-Gaussian non-local block with residual output ``W_z y + x``.

    Args:
        ch: channel count of the input (and output).
        inner: channel count of the theta/phi/g embeddings.
        sparse: max-pool factor applied to key/value positions (1 = dense).
    """

    def __init__(self, ch: int, inner: int, rng: np.random.Generator, sparse: int = 1):
        super().__init__()
        if sparse < 1:
            raise ValueError(f"sparse factor must be >= 1, got {sparse}")
        self.sparse = sparse
        self.theta = Conv2d(ch, inner, 1, rng, bias=False)
        self.phi = Conv2d(ch, inner, 1, rng, bias=False)
        self.g = Conv2d(ch, inner, 1, rng, bias=False)
        self.z = Conv2d(inner, ch, 1, rng, bias=False, gain=0.1)

    def affinity(self, x):
        """Row-stochastic ``[N, HW, M]`` attention weights and the values ``[N, M, inner]``."""
        n, _, h, w = x.shape
        keys_src = x if self.sparse == 1 else ad.maxpool2d(x, self.sparse)
        q = ad.transpose(self.theta(x).reshape(n, -1, h * w), (0, 2, 1))
        k = self.phi(keys_src)
        k = k.reshape(n, k.shape[1], -1)
        v = self.g(keys_src)
        v = ad.transpose(v.reshape(n, v.shape[1], -1), (0, 2, 1))
        return ad.softmax(ad.matmul(q, k), axis=-1), v

    def __call__(self, x):
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        n, _, h, w = x.shape
        attn, v = self.affinity(x)
        y = ad.transpose(ad.matmul(attn, v), (0, 2, 1)).reshape(n, -1, h, w)
        out = self.z(y) + x
        return out.reshape(out.shape[1:]) if single else out


class NLAM(Module):
    def __init__(self, ch: int, rng: np.random.Generator, inner: int | None = None, sparse: int = 1):
        super().__init__()
        inner = inner or max(1, ch // 2)
        for i in range(3):
            setattr(self, f"main{i}", ResBlock(ch, rng))
        self.nln = NonLocalBlock(ch, inner, rng, sparse)
        for i in range(3):
            setattr(self, f"mask{i}", ResBlock(ch, rng))
        self.mask_out = Conv2d(ch, ch, 1, rng)
        self.main = [getattr(self, f"main{i}") for i in range(3)]
        self.mask_blocks = [getattr(self, f"mask{i}") for i in range(3)]

    def main_branch(self, x):
        for block in self.main:
            x = block(x)
        return x

    def attention_mask(self, x):
        """Joint spatial-channel mask, every element strictly inside (0, 1)."""
        m = self.nln(x)
        for block in self.mask_blocks:
            m = block(m)
        return ad.sigmoid(self.mask_out(m))

    def __call__(self, x, masks: list | None = None):
        mask = self.attention_mask(x)
        if masks is not None:
            masks.append(mask.data)
        return x + mask * self.main_branch(x)
