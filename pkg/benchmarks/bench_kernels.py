"""Compare the numba-compiled kernels with their interpreted fallback.

Runs itself twice in fresh interpreters, once normally and once with
``NLAIC_DISABLE_NUMBA=1``, times the hot kernels and checks that both paths
produce identical outputs.

    python benchmarks/bench_kernels.py [--repeat 3]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # compile / warm up
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a if isinstance(a, bytes) else np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def worker(repeat: int) -> dict:
    from nlaic import _jit, codec, rangecoder as rc
    from nlaic.entropy import gaussian_pmf_table
    from nlaic.networks import ArchConfig, CodecModel
    from nlaic.quant import QualityScalingSet

    rng = np.random.default_rng(0)
    results = {"numba": _jit.USE_NUMBA}

    pmfs = rng.random((64, 40)) ** 3 + 1e-9
    cdfs = rc.build_cdfs(pmfs / pmfs.sum(1, keepdims=True))
    ids = rng.integers(0, 64, 20_000)
    symbols = rng.integers(0, 40, ids.size)
    t, data = _best(lambda: rc.rc_encode(symbols, cdfs, ids), repeat)
    results["rc_encode 20k"] = (t, _digest(data))
    t, out = _best(lambda: rc.rc_decode(data, cdfs, symbols.size, ids), repeat)
    results["rc_decode 20k"] = (t, _digest(out))

    mu, sigma = rng.normal(size=2000), np.exp(rng.normal(size=2000))
    t, tab = _best(lambda: gaussian_pmf_table(mu, sigma, 1.3, 0.1, 20), repeat)
    results["gaussian_pmf_table 2000x41"] = (t, _digest(tab))

    model = CodecModel(ArchConfig(n_channels=8, latent_channels=32, context_kernel=5))
    model.enc.layers[6].w.data *= 40.0
    model.quality_tables.append(QualityScalingSet(np.full(32, 2.0), np.zeros(32)))
    img = np.random.default_rng(1).random((3, 64, 128))
    for variant in ("full_causal", "no_left"):
        t, comp = _best(lambda: codec.compress(model, img, 1, variant), repeat)
        results[f"compress {variant} 64x128"] = (t, _digest(comp.data))
        t, dec = _best(lambda: codec.decompress(model, comp.data), repeat)
        results[f"decompress {variant} 64x128"] = (t, _digest(dec.image))
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return 0

    runs = {}
    for label, flag in (("numba", "0"), ("python", "1")):
        env = dict(os.environ, NLAIC_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        runs[label] = json.loads(proc.stdout.strip().splitlines()[-1])
    if not runs["numba"].pop("numba") or runs["python"].pop("numba"):
        print("warning: numba switch did not take effect", file=sys.stderr)
    width = max(len(k) for k in runs["numba"])
    print(f"{'kernel':{width}s}  {'numba s':>10s}  {'python s':>10s}  {'speedup':>8s}  identical")
    mismatch = False
    for key, (t_nb, h_nb) in runs["numba"].items():
        t_py, h_py = runs["python"][key]
        mismatch |= h_nb != h_py
        print(f"{key:{width}s}  {t_nb:10.4f}  {t_py:10.4f}  {t_py / t_nb:7.1f}x  {h_nb == h_py}")
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())
