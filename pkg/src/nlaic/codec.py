"""Image <-> bitstream: transforms, quantization, entropy models and coder.

Encoding::

    y = E_M(pad(x));  z = E_h(y);  z_sym = Q(z)            -> hyper segment
    hyp = D_h(z_sym);  B = Q(a y + b);  x_hat = (B - b)/a  -> main segment

The main segment codes ``B`` in raster order (channel, row, column); each
symbol's pmf comes from the context head evaluated on ``x_hat`` at causal
positions and the hyper features.  Decoding mirrors this.  Positions that
share a schedule group (a channel for ``channel_only``, a row for
``no_left``) have their parameters evaluated concurrently before their
symbols are decoded, which is exact because no group member depends on
another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from ._jit import njit, prange
from .bitstream import HEADER_SIZE, BitstreamError, BitstreamHeader, parse_bitstream, serialize_bitstream
from .entropy import CODER_FLOOR, check_variant, context_params_kernel, gaussian_pmf_kernel, schedule_groups
from .networks import DIVISOR, CodecModel
from .quant import QualityScalingSet, apply_isf, apply_sf, round_half_away
from .rangecoder import (
    _decode_symbol,
    _decoder_state,
    _decoder_status,
    _encode_finish,
    _encode_symbol,
    _encoder_state,
    _quantize_pmf,
    build_cdfs,
    raise_for_status,
    rc_decode,
    rc_encode,
)

MAX_BOUND = 255


@dataclass
class Compressed:
    """Bitstream plus the encoder-side quantities tests and reports need."""

    data: bytes
    header: BitstreamHeader
    symbols: np.ndarray
    z_symbols: np.ndarray
    x_hat: np.ndarray
    est_bits: dict = field(default_factory=dict)

    @property
    def bits(self) -> int:
        return 8 * len(self.data)

    @property
    def num_pixels(self) -> int:
        return self.header.width * self.header.height

    @property
    def bpp(self) -> float:
        return self.bits / self.num_pixels

    @property
    def est_bpp(self) -> float:
        return self.est_bits["total"] / self.num_pixels


# ------------------------------------------------------------------ padding


def pad_image(img: np.ndarray, divisor: int = DIVISOR) -> tuple[np.ndarray, int, int]:
    """Reflection-pad ``[3, H, W]`` at the bottom/right to multiples of ``divisor``."""
    _, h, w = img.shape
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return img, ph, pw


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected an image of shape [3, H, W], got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.shape[1] > 0xFFFF or img.shape[2] > 0xFFFF:
        raise ValueError(f"image {img.shape[1]}x{img.shape[2]} exceeds the 65535-pixel header limit")
    return img


# ------------------------------------------------------------------ kernels


@njit
def _encode_latents(sym, xhat, hyp, a, b, bound, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx):
    nc, nh, nw = sym.shape
    n = 2 * bound + 1
    out = np.zeros(3 * sym.size + 16, np.uint8)
    st = _encoder_state()
    pmf = np.empty(n)
    cdf = np.empty(n + 1, np.int64)
    bits = 0.0
    for c in range(nc):
        for i in range(nh):
            for j in range(nw):
                mu, sg = context_params_kernel(xhat, hyp, c, i, j, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx)
                gaussian_pmf_kernel(mu, sg, a[c], b[c], bound, pmf)
                t = sym[c, i, j] + bound
                bits -= math.log2(max(pmf[t], CODER_FLOOR))
                _quantize_pmf(pmf, cdf)
                _encode_symbol(st, out, cdf[t], cdf[t + 1])
    size = _encode_finish(st, out)
    return out[:size], bits


@njit(parallel=True)
def _decode_latents(data, hyp, a, b, bound, nc, nh, nw, starts, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx):
    sym = np.zeros((nc, nh, nw), np.int64)
    xhat = np.zeros((nc, nh, nw))
    st = _decoder_state(data)
    if st[3] != 0:
        return sym, xhat, st[3]
    n = 2 * bound + 1
    plane = nh * nw
    mu = np.empty(nc * plane)
    sg = np.empty(nc * plane)
    pmf = np.empty(n)
    cdf = np.empty(n + 1, np.int64)
    for g in range(starts.size - 1):
        s0 = starts[g]
        s1 = starts[g + 1]
        for t in prange(s0, s1):
            c = t // plane
            r = t - c * plane
            m, s = context_params_kernel(xhat, hyp, c, r // nw, r % nw, tdc, tdi, tdj, tw, kb, w1, b1, w2, b2, use_ctx)
            mu[t] = m
            sg[t] = s
        for t in range(s0, s1):
            c = t // plane
            r = t - c * plane
            i = r // nw
            j = r % nw
            gaussian_pmf_kernel(mu[t], sg[t], a[c], b[c], bound, pmf)
            _quantize_pmf(pmf, cdf)
            k = _decode_symbol(st, data, cdf, n)
            if k < 0:
                return sym, xhat, st[3]
            sym[c, i, j] = k - bound
            xhat[c, i, j] = (k - bound - b[c]) / a[c]
    return sym, xhat, _decoder_status(st, data)


def _group_starts(shape, variant: str, parallel: bool) -> np.ndarray:
    groups = schedule_groups(shape, variant, parallel)
    return np.array([0] + [int(g[-1]) + 1 for g in groups], np.int64)


# ------------------------------------------------------------------ hyper


def _hyper_tables(model: CodecModel, bound: int, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pmf = model.density.pmf_table(bound)
    c, h, w = shape
    ids = np.repeat(np.arange(c, dtype=np.int64), h * w)
    return pmf, build_cdfs(pmf), ids


def _scaling(model: CodecModel, quality: int, scaling: bool, channels: int) -> QualityScalingSet:
    sf = model.sf(quality)
    if sf.channels != channels:
        raise ValueError(f"scaling table {quality} has {sf.channels} channels, latent has {channels}")
    if not scaling and not sf.is_identity():
        raise ValueError(f"scaling=False needs an identity table, quality {quality} is not one")
    return sf


def encode_symbols(model: CodecModel, header: BitstreamHeader, z_sym: np.ndarray, symbols: np.ndarray,
                   x_hat: np.ndarray) -> tuple[bytes, dict]:
    """Entropy-code both segments for already quantized symbols.

    ``header.bound`` and ``header.hyper_bound`` are taken from the symbols.
    Returns the container and the estimated bits per segment.
    """
    z_bound = int(np.abs(z_sym).max())
    if z_bound > MAX_BOUND:
        raise ValueError(f"hyper symbols reach {z_bound}, beyond the {MAX_BOUND} alphabet limit")
    bound = int(np.abs(symbols).max())
    if bound > MAX_BOUND:
        raise ValueError(f"latent symbols reach {bound}, beyond the {MAX_BOUND} alphabet limit")
    zpmf, zcdfs, zids = _hyper_tables(model, z_bound, z_sym.shape)
    zflat = z_sym.reshape(-1) + z_bound
    hyper_bytes = rc_encode(zflat, zcdfs, zids)
    z_est = float(-np.sum(np.log2(np.maximum(zpmf[zids, zflat], CODER_FLOOR))))
    with ad.no_grad():
        hyp = np.ascontiguousarray(model.hyper_decode(z_sym.astype(np.float64)).data)
    sf = model.sf(header.quality)
    head = model.context[header.variant]
    main, main_est = _encode_latents(symbols.astype(np.int64), np.ascontiguousarray(x_hat, np.float64), hyp,
                                     sf.a, sf.b, bound, *head.packed())
    header = replace(header, bound=bound, hyper_bound=z_bound)
    data = serialize_bitstream(header, hyper_bytes, main.tobytes())
    est = {"header": 8.0 * HEADER_SIZE, "hyper": z_est, "main": float(main_est)}
    est["total"] = est["header"] + est["hyper"] + est["main"]
    return data, est


def compress(model: CodecModel, img, quality: int = 0, variant: str = "full_causal", scaling: bool = True) -> Compressed:
    """Encode a ``[3, H, W]`` image with values in ``[0, 1]``.

    ``scaling=False`` bypasses the scaling stage entirely (the latents are
    rounded directly).  It is only allowed for identity tables, where it must
    give the same bytes as the scaled path.
    """
    check_variant(variant)
    img = _check_image(img)
    _, height, width = img.shape
    padded, ph, pw = pad_image(img)
    with ad.no_grad():
        y = model.main_encode(padded).data
        z = model.hyper_encode(y).data
    z_sym = round_half_away(z).astype(np.int64)
    c = y.shape[0]
    sf = _scaling(model, quality, scaling, c)
    if scaling:
        symbols = round_half_away(apply_sf(y, sf)).astype(np.int64)
        x_hat = apply_isf(symbols.astype(np.float64), sf)
    else:
        symbols = round_half_away(y).astype(np.int64)
        x_hat = symbols.astype(np.float64)
    header = BitstreamHeader(width, height, c, quality, variant, 0, 0, ph, pw, model.fingerprint())
    data, est = encode_symbols(model, header, z_sym, symbols, x_hat)
    return Compressed(data, parse_bitstream(data)[0], symbols, z_symbols=z_sym, x_hat=x_hat, est_bits=est)


@dataclass
class Decoded:
    image: np.ndarray
    symbols: np.ndarray
    x_hat: np.ndarray
    header: BitstreamHeader
    z_symbols: np.ndarray


def decode_latents(model: CodecModel, data: bytes, parallel: bool = True) -> Decoded:
    """Entropy-decode both segments; ``parallel=False`` forces one-by-one evaluation."""
    header, hyper, main = parse_bitstream(data)
    if header.fingerprint != model.fingerprint():
        raise BitstreamError(
            f"model mismatch: bitstream fingerprint {header.fingerprint:08x}, model {model.fingerprint():08x}"
        )
    c = model.arch.latent_channels
    if header.channels != c:
        raise BitstreamError(f"bitstream has {header.channels} latent channels, model {c}")
    if header.variant not in model.context:
        raise BitstreamError(f"model has no context head for variant {header.variant!r}")
    sf = model.sf(header.quality)
    ph, pw = header.height + header.pad_h, header.width + header.pad_w
    if ph % DIVISOR or pw % DIVISOR:
        raise BitstreamError(f"padded size {ph}x{pw} is not a multiple of {DIVISOR}")
    zshape = (c, ph // DIVISOR, pw // DIVISOR)
    _, zcdfs, zids = _hyper_tables(model, header.hyper_bound, zshape)
    z_sym = rc_decode(hyper, zcdfs, zids.size, zids).reshape(zshape) - header.hyper_bound
    with ad.no_grad():
        hyp = np.ascontiguousarray(model.hyper_decode(z_sym.astype(np.float64)).data)
    shape = (c, ph // 16, pw // 16)
    starts = _group_starts(shape, header.variant, parallel)
    head = model.context[header.variant]
    buf = np.frombuffer(main, np.uint8)
    symbols, x_hat, status = _decode_latents(buf, hyp, sf.a, sf.b, header.bound, *shape, starts, *head.packed())
    raise_for_status(int(status))
    return Decoded(np.empty(0), symbols, x_hat, header, z_sym)


def decompress(model: CodecModel, data: bytes, parallel: bool = True) -> Decoded:
    """Full decode to a ``[3, H, W]`` image in ``[0, 1]`` with padding removed."""
    dec = decode_latents(model, data, parallel)
    with ad.no_grad():
        rec = model.main_decode(dec.x_hat).data
    dec.image = rec[:, : dec.header.height, : dec.header.width]
    return dec


def reencode(model: CodecModel, dec: Decoded) -> bytes:
    """Container rebuilt from decoded symbols; equals the original stream."""
    return encode_symbols(model, dec.header, dec.z_symbols, dec.symbols, dec.x_hat)[0]


def rate_breakdown(data: bytes) -> dict:
    """Exact byte accounting of a container."""
    header, hyper, main = parse_bitstream(data)
    bits = {"header": 8 * HEADER_SIZE, "hyper": 8 * len(hyper), "main": 8 * len(main)}
    total = sum(bits.values())
    out = {f"{k}_bits": v for k, v in bits.items()}
    out["total_bits"] = total
    out.update({f"{k}_share": 100.0 * v / total for k, v in bits.items()})
    out["bpp"] = total / (header.width * header.height)
    return out


def attention_masks(model: CodecModel, img) -> list[np.ndarray]:
    """Masks of every NLAM in the main encoder for one image, in network order."""
    img = _check_image(img)
    padded, _, _ = pad_image(img)
    masks: list[np.ndarray] = []
    with ad.no_grad():
        model.main_encode(padded, masks)
    return masks
