"""Probability models for the hyperprior and the latent features.

* :class:`FactorizedDensity` learns one monotone univariate CDF per channel
  for the hyper symbols.  The integer pmf is the density convolved with a
  unit-width uniform, i.e. ``CDF(k + 0.5) - CDF(k - 0.5)``.
* :func:`gaussian_integer_pmf` gives the conditional Gaussian pmf of a scaled
  symbol ``k = Q(a x + b)``.  In the unscaled domain its bin is
  ``[(k - 0.5 - b)/a, (k + 0.5 - b)/a]``.
* :class:`ContextHead` predicts ``(mu, sigma)`` per latent element from a
  causal 3-d masked convolution over already-decoded latents plus the two
  hyper features aligned with that element, fused by two 1x1x1 layers.

The ``*_kernel`` functions are the coding-path versions.  They are
scalar-loop kernels built on ``math.erfc``/``math.exp``, so the encoder and
decoder (jitted or interpreted) evaluate the same IEEE operations in the same
order and agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from . import autodiff as ad
from ._jit import njit, prange
from .layers import Module

CONTEXT_VARIANTS = ("hyper_only", "channel_only", "no_left", "full_causal")
LIKELIHOOD_FLOOR = 1e-9
CODER_FLOOR = 2.0**-16
LOG_SIGMA_CLAMP = 13.8
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def check_variant(variant: str) -> str:
    if variant not in CONTEXT_VARIANTS:
        raise ValueError(f"unknown context variant {variant!r}, expected one of {CONTEXT_VARIANTS}")
    return variant


@dataclass
class EntropyParams:
    """Per-element Gaussian parameters plus the per-channel scaling in effect."""

    mu: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        lo, hi = math.exp(-LOG_SIGMA_CLAMP), math.exp(LOG_SIGMA_CLAMP)
        if np.any(self.sigma < lo * (1 - 1e-12)) or np.any(self.sigma > hi * (1 + 1e-12)):
            raise ValueError("sigma outside the clamped range")


# ------------------------------------------------------------------ rates


def rate_bits(likelihood) -> ad.Tensor:
    """Differentiable ``-sum log2 p``; zero probabilities are a modeling failure."""
    p = ad.as_tensor(likelihood)
    if np.any(p.data <= 0):
        raise ValueError("zero-probability symbol: the entropy model assigns no mass to coded data")
    return -ad.tsum(ad.log2(p))


def estimate_rate(symbols, pmf, offset: int = 0) -> float:
    """Bits needed for ``symbols`` under a pmf provider.

    Args:
        symbols: integer symbols.
        pmf: a shared 1-d pmf, a 2-d array with one row per symbol, or a
            callable ``pmf(i) -> row``.
        offset: symbol value stored in column 0 (``-L`` for ``[-L, L]``).
    """
    symbols = np.asarray(symbols, np.int64).reshape(-1)
    idx = symbols - offset
    if callable(pmf):
        probs = np.array([pmf(i)[idx[i]] for i in range(idx.size)], dtype=np.float64)
    else:
        pmf = np.asarray(pmf, np.float64)
        probs = pmf[idx] if pmf.ndim == 1 else pmf[np.arange(idx.size), idx]
    if np.any(probs <= 0):
        raise ValueError("zero-probability symbol: the entropy model assigns no mass to coded data")
    return float(-np.sum(np.log2(probs)))


# ------------------------------------------------------- factorized density


class FactorizedDensity(Module):
    """Per-channel monotone CDF ``sigmoid(f_K o ... o f_1(x))``.

    Each ``f_k`` is an affine map with softplus-transformed (hence
    non-negative) matrix, followed for all but the last layer by
    ``x + tanh(a) * tanh(x)``, which stays monotone because
    ``tanh(a) > -1``.  Composition of monotone maps keeps the CDF
    nondecreasing for any parameter values.
    """

    def __init__(self, channels: int, rng: np.random.Generator, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.n_layers = len(dims) - 1
        for k in range(self.n_layers):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            setattr(self, f"H{k}", ad.Param(np.full((channels, dims[k + 1], dims[k]), init)))
            setattr(self, f"b{k}", ad.Param(rng.uniform(-0.5, 0.5, (channels, dims[k + 1], 1))))
            if k < self.n_layers - 1:
                setattr(self, f"a{k}", ad.Param(np.zeros((channels, dims[k + 1], 1))))

    def logits(self, x):
        """Pre-sigmoid CDF for inputs ``[C, 1, n]``."""
        for k in range(self.n_layers):
            x = ad.matmul(ad.softplus(getattr(self, f"H{k}")), x) + getattr(self, f"b{k}")
            if k < self.n_layers - 1:
                x = x + ad.tanh(getattr(self, f"a{k}")) * ad.tanh(x)
        return x

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF per channel at points ``x`` of shape ``[C, n]`` (no graph)."""
        with ad.no_grad():
            lg = self.logits(ad.Tensor(np.asarray(x, np.float64)[:, None, :])).data[:, 0, :]
        return special.expit(lg)

    def likelihood(self, z) -> ad.Tensor:
        """Probability mass of the unit bin around each element of ``z [.., C, h, w]``."""
        z = ad.as_tensor(z)
        shape = z.shape
        c = shape[-3]
        if c != self.channels:
            raise ValueError(f"density has {self.channels} channels, input {shape}")
        v = ad.transpose(ad.reshape(z, (-1, c, shape[-2] * shape[-1])), (1, 0, 2))
        v = ad.reshape(v, (c, 1, -1))
        lower = self.logits(v - 0.5)
        upper = self.logits(v + 0.5)
        # evaluate in the tail that keeps the sigmoid difference well conditioned
        sign = -np.sign(lower.data + upper.data)
        p = ad.absolute(ad.sigmoid(upper * sign) - ad.sigmoid(lower * sign))
        p = ad.lower_bound(p, LIKELIHOOD_FLOOR)
        p = ad.transpose(ad.reshape(p, (c, -1, shape[-2] * shape[-1])), (1, 0, 2))
        return ad.reshape(p, shape)

    def pmf_table(self, bound: int) -> np.ndarray:
        """Per-channel pmf over ``[-bound, bound]``; edge symbols absorb the tails."""
        k = np.arange(-bound, bound + 1, dtype=np.float64)
        edges = np.concatenate([k - 0.5, [bound + 0.5]])
        cdf = self.cdf(np.broadcast_to(edges, (self.channels, edges.size)))
        cdf[:, 0], cdf[:, -1] = 0.0, 1.0
        return np.maximum(np.diff(cdf, axis=1), 0.0)


def factorized_pmf(k: int, channel: int, density: FactorizedDensity, bound: int) -> float:
    """Tail-absorbing pmf of symbol ``k`` in ``[-bound, bound]`` for one channel."""
    if abs(k) > bound:
        raise ValueError(f"symbol {k} outside alphabet [-{bound}, {bound}]")
    return float(density.pmf_table(bound)[channel, k + bound])


# ------------------------------------------------------- gaussian model


def gaussian_likelihood(x, mu, sigma, a=1.0) -> ad.Tensor:
    """Mass of the width-``1/a`` bin centred on ``x`` (unscaled domain).

    Uses the reflected form ``Phi((h - v)/s) - Phi((-h - v)/s)`` with
    ``v = |x - mu|`` so the difference is taken in the upper half, where it is
    accurate.
    """
    half = 0.5 / a if not isinstance(a, ad.Tensor) else ad.Tensor(0.5) / a
    v = ad.absolute(ad.as_tensor(x) - mu)
    upper = ad.ndtr((half - v) / sigma)
    lower = ad.ndtr((-half - v) / sigma)
    return ad.lower_bound(upper - lower, LIKELIHOOD_FLOOR)


def gaussian_integer_pmf(k, mu, sigma, a=1.0, b=0.0) -> np.ndarray:
    """``P[Q(a x + b) = k]`` for ``x ~ N(mu, sigma^2)``, without tail absorption."""
    k = np.asarray(k, np.float64)
    hi = ((k + 0.5 - b) / a - mu) / sigma
    lo = ((k - 0.5 - b) / a - mu) / sigma
    upper_half = lo >= 0
    return np.where(upper_half, special.ndtr(-lo) - special.ndtr(-hi), special.ndtr(hi) - special.ndtr(lo))


@njit
def _phi(t):
    return 0.5 * math.erfc(-t * _INV_SQRT2)


@njit
def gaussian_pmf_kernel(mu, sigma, a, b, bound, out):
    """Tail-absorbing pmf over ``[-bound, bound]`` written to ``out``."""
    n = 2 * bound + 1
    for t in range(n):
        k = t - bound
        lo = -math.inf if t == 0 else ((k - 0.5 - b) / a - mu) / sigma
        hi = math.inf if t == n - 1 else ((k + 0.5 - b) / a - mu) / sigma
        if lo >= 0.0:
            out[t] = _phi(-lo) - _phi(-hi)
        else:
            out[t] = _phi(hi) - _phi(lo)


def gaussian_pmf_table(mu, sigma, a, b, bound: int) -> np.ndarray:
    """Rows of :func:`gaussian_pmf_kernel` for flat arrays of parameters."""
    mu, sigma = np.ravel(mu), np.ravel(sigma)
    a = np.broadcast_to(np.asarray(a, np.float64), mu.shape)
    b = np.broadcast_to(np.asarray(b, np.float64), mu.shape)
    out = np.empty((mu.size, 2 * bound + 1))
    for r in range(mu.size):
        gaussian_pmf_kernel(float(mu[r]), float(sigma[r]), float(a[r]), float(b[r]), bound, out[r])
    return out


# ------------------------------------------------------- context model


class ContextHead(Module):
    """Context predictor ``(x_hat, hyper) -> (mu, sigma)`` for one variant.

    Each latent element gets a feature vector made of the masked-convolution
    response at its position (absent for ``hyper_only``) and its two
    hyper features (channels ``c`` and ``C + c`` of the hyper decoder
    output).  A 1x1x1 layer, ReLU and a second 1x1x1 layer map that vector to
    ``(mu, s)`` and ``sigma = exp(clamp(s))``.
    """

    def __init__(self, variant: str, rng: np.random.Generator, kernel: int = 5, hidden: int = 3):
        super().__init__()
        self.variant = check_variant(variant)
        self.uses_context = variant != "hyper_only"
        self.kernel = kernel
        if self.uses_context:
            shape = (kernel, kernel, kernel)
            n_taps = len(ad.causal_taps(shape, variant))
            self.k = ad.Param(rng.uniform(-1, 1, shape) / math.sqrt(n_taps) * ad.causal_mask(shape, variant))
            self.kb = ad.Param(np.zeros(1))
        n_feat = 3 if self.uses_context else 2
        self.w1 = ad.Param(rng.uniform(-1, 1, (hidden, n_feat)) / math.sqrt(n_feat))
        self.b1 = ad.Param(np.full(hidden, 0.1))
        self.w2 = ad.Param(rng.uniform(-1, 1, (2, hidden)) / math.sqrt(hidden))
        self.b2 = ad.Param(np.zeros(2))

    def features(self, x_hat, hyp) -> ad.Tensor:
        x_hat, hyp = ad.as_tensor(x_hat), ad.as_tensor(hyp)
        c = x_hat.shape[-3]
        if hyp.shape[-3] != 2 * c or hyp.shape[-2:] != x_hat.shape[-2:]:
            raise ValueError(f"hyper features {hyp.shape} do not match latent {x_hat.shape}")
        h0 = ad.getitem(hyp, (Ellipsis, slice(0, c), slice(None), slice(None)))
        h1 = ad.getitem(hyp, (Ellipsis, slice(c, 2 * c), slice(None), slice(None)))
        feats = [h0, h1]
        if self.uses_context:
            ctx = ad.masked_conv3d(x_hat, self.k, self.kb, self.variant)
            feats.insert(0, ctx)
        return ad.stack(feats, axis=-1)

    def predict(self, x_hat, hyp) -> tuple[ad.Tensor, ad.Tensor]:
        """Differentiable ``(mu, sigma)`` shaped like ``x_hat`` ([C,h,w] or [N,C,h,w])."""
        f = self.features(x_hat, hyp)
        hidden = ad.relu(ad.matmul(f, ad.transpose(self.w1, (1, 0))) + self.b1)
        out = ad.matmul(hidden, ad.transpose(self.w2, (1, 0))) + self.b2
        mu = ad.getitem(out, (Ellipsis, 0))
        s = ad.clamp(ad.getitem(out, (Ellipsis, 1)), -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        return mu, ad.exp(s)

    def packed(self) -> tuple:
        """Flat arrays consumed by the coding kernels."""
        if self.uses_context:
            taps = ad.causal_taps(self.k.shape, self.variant)
            kflat = self.k.data.reshape(-1)
            tdc = np.array([t[1] for t in taps], np.int64)
            tdi = np.array([t[2] for t in taps], np.int64)
            tdj = np.array([t[3] for t in taps], np.int64)
            tw = np.array([kflat[t[0]] for t in taps], np.float64)
            kb = float(self.kb.data[0])
        else:
            tdc = tdi = tdj = np.zeros(0, np.int64)
            tw = np.zeros(0, np.float64)
            kb = 0.0
        return (tdc, tdi, tdj, tw, kb,
                np.ascontiguousarray(self.w1.data), np.ascontiguousarray(self.b1.data),
                np.ascontiguousarray(self.w2.data), np.ascontiguousarray(self.b2.data),
                self.uses_context)


@njit
def context_params_kernel(xhat, hyp, c, i, j, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx):
    """``(mu, sigma)`` at one latent position, reading causal taps only."""
    nc, nh, nw = xhat.shape
    f0 = 0.0
    if use_ctx:
        acc = 0.0
        for t in range(tw.size):
            cc = c + tdc[t]
            ii = i + tdi[t]
            jj = j + tdj[t]
            if cc >= 0 and cc < nc and ii >= 0 and ii < nh and jj >= 0 and jj < nw:
                acc += tw[t] * xhat[cc, ii, jj]
        f0 = acc + kb
    h0 = hyp[c, i, j]
    h1 = hyp[nc + c, i, j]
    mu = b2[0]
    s = b2[1]
    for k in range(w1.shape[0]):
        if use_ctx:
            z = b1[k] + w1[k, 0] * f0 + w1[k, 1] * h0 + w1[k, 2] * h1
        else:
            z = b1[k] + w1[k, 0] * h0 + w1[k, 1] * h1
        if z > 0.0:
            mu += w2[0, k] * z
            s += w2[1, k] * z
    s = min(max(s, -LOG_SIGMA_CLAMP), LOG_SIGMA_CLAMP)
    return mu, math.exp(s)


@njit(parallel=True)
def context_params_group(xhat, hyp, cs, iis, jjs, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx, mu, sigma):
    """Evaluate a dependency-free group of positions concurrently."""
    for t in prange(cs.size):
        m, s = context_params_kernel(xhat, hyp, cs[t], iis[t], jjs[t], tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx)
        mu[t] = m
        sigma[t] = s


def context_params(head: ContextHead, xhat: np.ndarray, hyp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coding-path ``(mu, sigma)`` for every position of a fully known latent."""
    xhat = np.ascontiguousarray(xhat, np.float64)
    hyp = np.ascontiguousarray(hyp, np.float64)
    c, h, w = np.indices(xhat.shape).reshape(3, -1).astype(np.int64)
    mu = np.empty(c.size)
    sigma = np.empty(c.size)
    context_params_group(xhat, hyp, c, h, w, *head.packed(), mu, sigma)
    return mu.reshape(xhat.shape), sigma.reshape(xhat.shape)


def schedule_groups(shape, variant: str, parallel: bool = True) -> list[np.ndarray]:
    """Raster-ordered groups whose parameters can be evaluated together.

    Within a group no element depends on another, so a decoder may compute
    the whole group's parameters at once and then decode its symbols in
    raster order.  ``channel_only`` groups by channel, ``no_left`` by row;
    ``hyper_only`` has no latent dependencies at all.  ``parallel=False``
    (and ``full_causal``) yields one element per group.
    """
    check_variant(variant)
    c, h, w = shape
    flat = np.arange(c * h * w, dtype=np.int64)
    if not parallel or variant == "full_causal":
        return [flat[t : t + 1] for t in range(flat.size)]
    if variant == "hyper_only":
        return [flat]
    if variant == "channel_only":
        return list(flat.reshape(c, h * w))
    return list(flat.reshape(c * h, w))
