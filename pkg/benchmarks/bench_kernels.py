"""Compare the numba and pure-numpy convolution backends.

Two measurements:

* kernel level: ``im2col``/``col2im`` from both backends on the same arrays,
  in one process (numba compile time is excluded by a warm-up call);
* end to end: a short MRVSR inference and one training step, run in child
  processes with and without ``LIPVSR_DISABLE_NUMBA=1``.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--skip-e2e]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lipvsr import _kernels

CASES = [
    # (batch, channels, height, width, kernel)
    (1, 16, 32, 32, 3),
    (4, 32, 32, 32, 3),
    (1, 64, 64, 64, 3),
    (8, 16, 64, 64, 3),
]

E2E_SNIPPET = r"""
import json, time
import numpy as np
from lipvsr import _kernels, models, training, videodata
net = models.build(models.preset("mrvsr", f=32, s=4), seed=0)
lr = np.random.default_rng(0).random((12, 3, 32, 32), dtype=np.float32)
t = time.perf_counter(); models.run_sequence(net, lr); infer = time.perf_counter() - t
seqs = videodata.training_corpus(2, 12, 64, seed=0)
cfg = training.TrainConfig(epochs=1, n_clips=4, batch=4, crop=64, f=32, spectral_size=16, seed=0)
t = time.perf_counter(); training.train_network(models.preset("mrvsr", f=32), training.RandomClips(seqs, cfg), cfg)
train = time.perf_counter() - t
print(json.dumps({"backend": _kernels.BACKEND, "infer_s": infer, "train_s": train}))
"""


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> list[dict]:
    if not _kernels.NUMBA_AVAILABLE:
        print("numba unavailable; kernel comparison skipped")
        return []
    rng = np.random.default_rng(0)
    rows = []
    for B, C, H, W, k in CASES:
        xp = rng.standard_normal((B, C, H + k - 1, W + k - 1)).astype(np.float32)
        cols = _kernels.im2col_numpy(xp, k)
        assert np.array_equal(cols, _kernels._im2col_nb(xp, k))
        _kernels._col2im_nb(cols, C, k, *xp.shape[2:])  # warm-up / compile
        row = {
            "shape": f"{B}x{C}x{H}x{W} k{k}",
            "im2col_numpy": _best(lambda: _kernels.im2col_numpy(xp, k), repeat),
            "im2col_numba": _best(lambda: _kernels._im2col_nb(xp, k), repeat),
            "col2im_numpy": _best(lambda: _kernels.col2im_numpy(cols, C, k, *xp.shape[2:]), repeat),
            "col2im_numba": _best(lambda: _kernels._col2im_nb(cols, C, k, *xp.shape[2:]), repeat),
        }
        rows.append(row)
    return rows


def bench_end_to_end() -> list[dict]:
    results = []
    for disable in ("0", "1"):
        env = {**os.environ, "LIPVSR_DISABLE_NUMBA": disable}
        # one throwaway run so numba's on-disk cache is populated
        if disable == "0":
            subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, check=True, capture_output=True)
        out = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, check=True, capture_output=True, text=True)
        results.append(json.loads(out.stdout.strip().splitlines()[-1]))
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    rows = bench_kernels(args.repeat)
    if rows:
        print(f"{'case':<20}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
        for r in rows:
            for op in ("im2col", "col2im"):
                a, b = r[f"{op}_numpy"] * 1e3, r[f"{op}_numba"] * 1e3
                print(f"{r['shape']:<20}{op:<8}{a:>10.3f}{b:>10.3f}{a / b:>9.2f}")

    if not args.skip_e2e:
        print()
        print(f"{'backend':<8}{'infer s':>10}{'train s':>10}")
        for r in bench_end_to_end():
            print(f"{r['backend']:<8}{r['infer_s']:>10.2f}{r['train_s']:>10.2f}")


if __name__ == "__main__":
    main()
