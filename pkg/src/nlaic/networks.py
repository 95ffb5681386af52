"""Analysis/synthesis transforms, hyper transforms and the checkpoint format.

Main encoder (4 stride-2 stages, NLAM after stages 2 and 4)::

    conv5 s2 3->N, RB; conv5 s2 N->N, NLAM; conv5 s2 N->N, RB; conv5 s2 N->C, NLAM

Main decoder mirrors it with stride-2 transposed convolutions.  Pixels are
shifted by -0.5 on the way in and +0.5 on the way out.  The hyper
encoder (NLAM, conv5 s2 C->N, RB, conv5 s2 N->C) and hyper decoder
(tconv C->N, RB, tconv N->2C, NLAM) add two more stages, so inputs must be
multiples of 64.

Checkpoint layout (``.nlck``), little-endian::

    b"NLCK" | version u8 | json_len u32 | json (arch, quality tables, meta)
    | n_entries u32 | n_entries x (name_len u16 | name utf-8 | ndim u8
    | dims u32 x ndim | float64 data, row-major)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import NLAM, ResBlock
from .entropy import CONTEXT_VARIANTS, ContextHead, FactorizedDensity
from .layers import Conv2d, ConvTranspose2d, Module, ModuleDict, Sequential
from .quant import QualityScalingSet

CKPT_MAGIC = b"NLCK"
CKPT_VERSION = 1
MAIN_STAGES = 4
HYPER_STAGES = 2
DIVISOR = 2 ** (MAIN_STAGES + HYPER_STAGES)
# pixels are centred before analysis and re-offset after synthesis
PIXEL_OFFSET = 0.5


@dataclass
class ArchConfig:
    n_channels: int = 32
    latent_channels: int = 32
    stage_resblocks: int = 1
    nln_sparse: int = 1
    nln_inner: int | None = None
    context_kernel: int = 5
    context_hidden: int = 3
    density_filters: tuple = (3, 3, 3)
    seed: int = 0

    def __post_init__(self):
        self.density_filters = tuple(self.density_filters)
        if self.n_channels < 1 or self.latent_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.context_kernel % 2 == 0:
            raise ValueError("context kernel must be odd")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["density_filters"] = list(self.density_filters)
        return d


def _conv_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cout * cin * k * k + (cout if bias else 0)


def _nlam_count(ch: int, inner: int) -> int:
    resblock = 2 * _conv_count(ch, ch, 3)
    nln = 4 * ch * inner
    return 6 * resblock + nln + _conv_count(ch, ch, 1)


def expected_param_counts(arch: ArchConfig) -> dict[str, int]:
    """Parameter count per group derived from the configuration alone."""
    n, c, r = arch.n_channels, arch.latent_channels, arch.stage_resblocks
    inner = lambda ch: arch.nln_inner or max(1, ch // 2)  # noqa: E731
    rb = lambda ch: 2 * _conv_count(ch, ch, 3)  # noqa: E731
    enc = (_conv_count(3, n, 5) + r * rb(n) + _conv_count(n, n, 5) + _nlam_count(n, inner(n))
           + _conv_count(n, n, 5) + r * rb(n) + _conv_count(n, c, 5) + _nlam_count(c, inner(c)))
    dec = (_nlam_count(c, inner(c)) + _conv_count(c, n, 5) + r * rb(n) + _conv_count(n, n, 5)
           + _nlam_count(n, inner(n)) + _conv_count(n, n, 5) + r * rb(n) + _conv_count(n, 3, 5))
    henc = _nlam_count(c, inner(c)) + _conv_count(c, n, 5) + rb(n) + _conv_count(n, c, 5)
    hdec = _conv_count(c, n, 5) + rb(n) + _conv_count(n, 2 * c, 5) + _nlam_count(2 * c, inner(2 * c))
    k = arch.context_kernel
    h = arch.context_hidden
    context = 0
    for v in CONTEXT_VARIANTS:
        n_feat = 2 if v == "hyper_only" else 3
        context += (k**3 + 1 if v != "hyper_only" else 0) + h * n_feat + h + 2 * h + 2
    dims = (1,) + arch.density_filters + (1,)
    density = c * sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))
    density += c * sum(arch.density_filters)
    return {"enc": enc, "dec": dec, "henc": henc, "hdec": hdec, "context": context, "density": density}


def check_divisible(h: int, w: int, divisor: int = DIVISOR) -> None:
    if h % divisor or w % divisor:
        ph, pw = (-h) % divisor, (-w) % divisor
        raise ValueError(
            f"input {h}x{w} is not a multiple of {divisor}; pad by {ph} rows and {pw} columns"
        )


class CodecModel(Module):
    """All learned parts of the codec plus its quality scaling tables."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        arch = arch or ArchConfig()
        self.arch = arch
        rng = np.random.default_rng(arch.seed)
        n, c, r = arch.n_channels, arch.latent_channels, arch.stage_resblocks
        s, inner = arch.nln_sparse, arch.nln_inner

        def nlam(ch):
            return NLAM(ch, rng, inner=inner, sparse=s)

        def rbs(ch):
            return [ResBlock(ch, rng) for _ in range(r)]

        self.enc = Sequential(
            Conv2d(3, n, 5, rng, stride=2), *rbs(n),
            Conv2d(n, n, 5, rng, stride=2), nlam(n),
            Conv2d(n, n, 5, rng, stride=2), *rbs(n),
            Conv2d(n, c, 5, rng, stride=2), nlam(c),
        )
        self.dec = Sequential(
            nlam(c), ConvTranspose2d(c, n, 5, rng), *rbs(n),
            ConvTranspose2d(n, n, 5, rng), nlam(n),
            ConvTranspose2d(n, n, 5, rng), *rbs(n),
            ConvTranspose2d(n, 3, 5, rng),
        )
        self.henc = Sequential(nlam(c), Conv2d(c, n, 5, rng, stride=2), ResBlock(n, rng), Conv2d(n, c, 5, rng, stride=2))
        self.hdec = Sequential(ConvTranspose2d(c, n, 5, rng), ResBlock(n, rng), ConvTranspose2d(n, 2 * c, 5, rng), nlam(2 * c))
        self.context = ModuleDict(
            {v: ContextHead(v, rng, arch.context_kernel, arch.context_hidden) for v in CONTEXT_VARIANTS}
        )
        self.density = FactorizedDensity(c, rng, arch.density_filters)
        self.quality_tables: list[QualityScalingSet] = [QualityScalingSet.identity(c)]
        self.meta: dict = {}

    # ---------------------------------------------------------- transforms

    def main_encode(self, img, masks: list | None = None):
        """``[.., 3, H, W] -> [.., C, H/16, W/16]`` real-valued latents."""
        img = ad.as_tensor(img)
        if img.shape[-3] != 3:
            raise ValueError(f"expected a 3-channel image, got shape {img.shape}")
        check_divisible(*img.shape[-2:])
        return self.enc(img - PIXEL_OFFSET, masks)

    def main_decode(self, latent, clamp: bool = True, masks: list | None = None):
        """Reconstruction; clamped to ``[0, 1]`` unless ``clamp=False`` (training)."""
        out = self.dec(ad.as_tensor(latent), masks) + PIXEL_OFFSET
        return ad.clamp(out, 0.0, 1.0) if clamp else out

    def hyper_encode(self, latent, masks: list | None = None):
        latent = ad.as_tensor(latent)
        check_divisible(*latent.shape[-2:], divisor=2**HYPER_STAGES)
        return self.henc(latent, masks)

    def hyper_decode(self, z_hat, masks: list | None = None):
        return self.hdec(ad.as_tensor(z_hat), masks)

    # ---------------------------------------------------------- bookkeeping

    def param_groups(self) -> dict[str, list[ad.Param]]:
        return {name: getattr(self, name).params() if name != "context" else
                [p for _, p in self.context.named_params()]
                for name in ("enc", "dec", "henc", "hdec", "context", "density")}

    def group_counts(self) -> dict[str, int]:
        return {k: sum(p.size for p in v) for k, v in self.param_groups().items()}

    def fingerprint(self) -> int:
        """CRC32 over architecture and all weights (scaling tables excluded)."""
        crc = zlib.crc32(json.dumps(self.arch.to_dict(), sort_keys=True).encode())
        for name, p in self.named_params():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data, "<f8").tobytes(), crc)
        return crc & 0xFFFFFFFF

    def sf(self, quality: int) -> QualityScalingSet:
        if not 0 <= quality < len(self.quality_tables):
            raise ValueError(f"quality index {quality} not in [0, {len(self.quality_tables) - 1}]")
        return self.quality_tables[quality]

    def copy(self) -> "CodecModel":
        other = CodecModel(self.arch)
        other.load_state(self.state())
        other.quality_tables = [QualityScalingSet.from_dict(t.to_dict()) for t in self.quality_tables]
        other.meta = json.loads(json.dumps(self.meta))
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_params())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint does not match architecture: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    # ---------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        header = json.dumps({
            "arch": self.arch.to_dict(),
            "quality_tables": [t.to_dict() for t in self.quality_tables],
            "meta": self.meta,
        }).encode()
        entries = list(self.named_params())
        chunks = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(header)), header,
                  struct.pack("<I", len(entries))]
        for name, p in entries:
            raw = name.encode()
            chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim))
            chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
            chunks.append(np.ascontiguousarray(p.data, "<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "CodecModel":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"model file {path} not found")
        data = path.read_bytes()
        if data[:4] != CKPT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint (bad magic)")
        version, json_len = struct.unpack_from("<BI", data, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 9
        info = json.loads(data[pos : pos + json_len])
        pos += json_len
        (n_entries,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode()
            pos += name_len
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            state[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        model = cls(ArchConfig(**info["arch"]))
        model.load_state(state)
        model.quality_tables = [QualityScalingSet.from_dict(t) for t in info["quality_tables"]]
        model.meta = info.get("meta", {})
        return model

