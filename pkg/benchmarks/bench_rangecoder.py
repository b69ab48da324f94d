"""Compiled vs pure-Python range coder throughput.

    python3 benchmarks/bench_rangecoder.py [--n 100000] [--repeat 3]

Both backends are imported directly so one process measures both; the
outputs are also checked for byte equality.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vovc import _rangecoder_py
from vovc.ratecode import EntropyModel, freq_table, quantize

try:
    from vovc import _rangecoder
except ImportError:
    _rangecoder = None


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args(argv)

    em = EntropyModel.init(scale=4.0)
    rng = np.random.default_rng(0)
    q = quantize(rng.laplace(0.0, 4.0, a.n), 1.0)
    cum = freq_table(em)

    backends = [("python", _rangecoder_py)]
    if _rangecoder is not None:
        backends.append(("compiled", _rangecoder))
    else:
        print("compiled backend not built; timing the pure-Python coder only")

    ref = None
    results = {}
    for name, mod in backends:
        data = mod.encode(q, cum, em.q_max)
        out = np.asarray(mod.decode(np.frombuffer(data, dtype=np.uint8), q.size, cum, em.q_max))
        assert np.array_equal(out, q), f"{name} round-trip failed"
        if ref is None:
            ref = data
        assert data == ref, "backends disagree"
        enc = best_of(lambda: mod.encode(q, cum, em.q_max), a.repeat)
        buf = np.frombuffer(data, dtype=np.uint8)
        dec = best_of(lambda: mod.decode(buf, q.size, cum, em.q_max), a.repeat)
        results[name] = (enc, dec)
        print(f"{name:9s} encode {a.n / enc / 1e6:8.3f} Msym/s   decode {a.n / dec / 1e6:8.3f} Msym/s   "
              f"({8 * len(data) / a.n:.3f} bits/sym)")
    if len(results) == 2:
        (pe, pd), (ce, cd) = results["python"], results["compiled"]
        print(f"speedup   encode {pe / ce:6.1f}x   decode {pd / cd:6.1f}x")


if __name__ == "__main__":
    main()
