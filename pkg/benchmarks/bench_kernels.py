"""Compare the numba and numpy im2col/col2im kernels.

Kernel timings call both implementations directly in one process.  The
end-to-end timing runs one PGN training step in two subprocesses, one of
them with PGN_DISABLE_NUMBA=1, so the env-flag dispatch is exercised too.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from pgn import _kernels

# (N, C, H, W, K, stride, pad) as seen in the desk-scale networks
CASES = [
    (32, 3, 32, 32, 3, 1, 1),
    (32, 16, 32, 32, 3, 2, 1),
    (32, 32, 16, 16, 3, 1, 1),
    (32, 64, 8, 8, 4, 2, 1),
]

STEP_SCRIPT = r"""
import json, time
import numpy as np
from pgn import _kernels, models, train, diffcore as dc
rng = dc.make_rng(0)
x = rng.uniform(0, 1, (32, 3, 32, 32)).astype(np.float32)
y = np.arange(32) % 10
f = models.FrozenClassifier(models.build_classifier(models.default_classifier_spec(), rng))
G = models.build_generator(models.default_generator_spec(), rng)
D = models.build_discriminator(init="from_classifier_trunk", classifier=f, rng=rng)
cfg = train.TrainConfig(mode="enhance")
opt_g, opt_d = train.make_optimizers(G, D, cfg)
train.train_step(x, y, G, D, f, cfg, opt_g, opt_d)  # warm-up / JIT
times = []
for _ in range(REPEAT):
    t = time.perf_counter()
    train.train_step(x, y, G, D, f, cfg, opt_g, opt_d)
    times.append(time.perf_counter() - t)
print(json.dumps({"backend": _kernels.backend(), "step_ms": 1e3 * float(np.median(times))}))
"""


def bench_kernels(repeat):
    rows = []
    rng = np.random.default_rng(0)
    for n, c, h, w, k, s, p in CASES:
        xp = rng.standard_normal((n, c, h + 2 * p, w + 2 * p)).astype(np.float32)
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        cols = _kernels.im2col_numpy(xp, k, k, s, oh, ow)
        impls = {"numpy": (_kernels.im2col_numpy, _kernels.col2im_numpy)}
        if _kernels.NUMBA_AVAILABLE:
            impls["numba"] = (_kernels._im2col_nb, _kernels._col2im_nb)
            assert np.array_equal(_kernels._im2col_nb(xp, k, k, s, oh, ow), cols)
        for name, (fwd, adj) in impls.items():
            fwd(xp, k, k, s, oh, ow)
            adj(cols, xp.shape[2], xp.shape[3], s)
            t_f = min(timeit.repeat(lambda: fwd(xp, k, k, s, oh, ow), number=1, repeat=repeat))
            t_a = min(timeit.repeat(lambda: adj(cols, xp.shape[2], xp.shape[3], s), number=1, repeat=repeat))
            rows.append((f"N{n} C{c} {h}x{w} k{k} s{s}", name, 1e3 * t_f, 1e3 * t_a))
    return rows


def bench_step(repeat):
    out = []
    for disable in ("0", "1"):
        env = dict(os.environ, PGN_DISABLE_NUMBA=disable)
        res = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.replace("REPEAT", str(repeat))],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-step", action="store_true", help="kernel timings only")
    args = ap.parse_args()

    print(f"{'case':<26} {'backend':<7} {'im2col ms':>10} {'col2im ms':>10}")
    for case, name, t_f, t_a in bench_kernels(args.repeat):
        print(f"{case:<26} {name:<7} {t_f:10.3f} {t_a:10.3f}")
    if not args.skip_step:
        print()
        for res in bench_step(max(3, args.repeat // 4)):
            print(f"one PGN train step (batch 32), {res['backend']:<6}: {res['step_ms']:.1f} ms")


if __name__ == "__main__":
    main()
