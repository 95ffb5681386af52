"""Quantization proxies and per-channel quality scaling factors.

A quality scaling set holds one ``(a_i, b_i)`` pair per latent channel.  The
encoder codes ``B = Q(a * x + b)`` and the decoder feeds ``(B - b) / a`` to the
synthesis transform, which retargets one trained model to other bitrates.
Rounding is half away from zero everywhere; bitstreams depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

QUANT_MODES = ("noise", "round")


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, mode: str, rng: np.random.Generator | None = None):
    """Uniform-noise proxy (training) or rounding (inference).

    ``noise`` adds i.i.d. ``U[-0.5, 0.5)`` samples and needs ``rng``; it keeps
    gradients flowing.  ``round`` applies half-away-from-zero rounding; on a
    tensor that requires gradients it acts as a straight-through estimator.
    """
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization is a training-only path and needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=np.shape(ad.as_tensor(x).data))
        return ad.as_tensor(x) + noise
    if mode == "round":
        if isinstance(x, ad.Tensor):
            return ad.round_ste(x)
        return round_half_away(x)
    raise ValueError(f"unknown quantization mode {mode!r}, expected one of {QUANT_MODES}")


@dataclass
class QualityScalingSet:
    """Per-channel affine ``a * x + b`` applied to latents before quantization."""

    a: np.ndarray
    b: np.ndarray
    lam: float | None = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.a.shape != self.b.shape:
            raise ValueError(f"scale/offset shapes differ: {self.a.shape} vs {self.b.shape}")
        if not np.all(self.a > 0):
            raise ValueError("quality scales must be strictly positive")

    @classmethod
    def identity(cls, channels: int) -> "QualityScalingSet":
        return cls(np.ones(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.a.size

    def is_identity(self) -> bool:
        return bool(np.all(self.a == 1.0) and np.all(self.b == 0.0))

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "lam": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "QualityScalingSet":
        return cls(d["a"], d["b"], d.get("lam"))


def _channel_view(v, ndim: int):
    return np.reshape(v, (-1,) + (1,) * 2) if ndim == 3 else np.reshape(v, (1, -1, 1, 1))


def _check_channels(x, sf: QualityScalingSet) -> None:
    ch = np.shape(ad.as_tensor(x).data)[-3]
    if ch != sf.channels:
        raise ValueError(f"latent has {ch} channels but scaling set has {sf.channels}")


def apply_sf(x0, sf: QualityScalingSet, a=None, b=None):
    """``a_i * x + b_i`` per channel.  ``a``/``b`` may be trainable overrides."""
    _check_channels(x0, sf)
    nd = ad.as_tensor(x0).ndim
    a = _channel_view(sf.a, nd) if a is None else a
    b = _channel_view(sf.b, nd) if b is None else b
    if isinstance(x0, ad.Tensor) or isinstance(a, ad.Tensor):
        return ad.as_tensor(x0) * a + b
    return np.asarray(x0) * a + b


def apply_isf(b_hat, sf: QualityScalingSet, a=None, b=None):
    """Inverse of :func:`apply_sf`: ``(B - b_i) / a_i`` per channel."""
    _check_channels(b_hat, sf)
    nd = ad.as_tensor(b_hat).ndim
    a = _channel_view(sf.a, nd) if a is None else a
    b = _channel_view(sf.b, nd) if b is None else b
    if isinstance(b_hat, ad.Tensor) or isinstance(a, ad.Tensor):
        return (ad.as_tensor(b_hat) - b) / a
    return (np.asarray(b_hat, dtype=np.float64) - b) / a


@dataclass
class LatentVolume:
    """Integer symbols ``[C, h, w]`` with the alphabet bound ``L = max|symbol|``."""

    symbols: np.ndarray
    bound: int = field(init=False)

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.bound = int(np.abs(self.symbols).max()) if self.symbols.size else 0
