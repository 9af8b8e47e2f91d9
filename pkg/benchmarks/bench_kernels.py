"""Compare the numba and numpy im2col/col2im kernels, alone and inside a training step.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from anodfd import kernels
from anodfd import tensor as T
from anodfd.model import AnoDFDNet, ModelConfig

# (batch, channels, H, W, kernel, stride, pad) as seen by the default encoder
SHAPES = [
    (4, 1, 64, 64, 3, 1, 1),
    (4, 16, 64, 64, 3, 2, 1),
    (4, 32, 32, 32, 3, 1, 1),
    (4, 64, 16, 16, 3, 2, 1),
]


def best_of(fn, repeat):
    fn()  # warm up (and compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for B, C, H, W, k, s, p in SHAPES:
        x = rng.standard_normal((B, C, H, W)).astype(np.float32)
        cols = kernels.im2col_numpy(x, k, k, s, p)
        g = rng.standard_normal(cols.shape).astype(np.float32)
        ops = {
            "im2col": (lambda: kernels.im2col_numpy(x, k, k, s, p), lambda: kernels.im2col_numba(x, k, k, s, p)),
            "col2im": (lambda: kernels.col2im_numpy(g, x.shape, k, k, s, p),
                       lambda: kernels.col2im_numba(g, x.shape, k, k, s, p)),
        }
        for name, (f_np, f_nb) in ops.items():
            a, b = best_of(f_np, repeat), best_of(f_nb, repeat)
            print(f"{str((B, C, H, W)) + f' k{k}s{s}':<28}{name:<8}{a:>10.3f}{b:>10.3f}{a / b:>8.2f}x")


def step_table(repeat):
    rng = np.random.default_rng(0)
    model = AnoDFDNet(ModelConfig())
    cur, his = rng.random((2, 4, 1, 64, 64)).astype(np.float32)
    y = (rng.random((4, 64, 64)) > 0.98).astype(np.float32)

    def step():
        T.bce(model.forward(cur, his), y).backward()
        model.zero_grad()

    print(f"\n{'backend':<10}{'fwd+bwd ms':>12}   (batch 4, 64x64, default config)")
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        print(f"{name:<10}{best_of(step, max(3, repeat // 4)):>12.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    kernel_table(args.repeat)
    step_table(args.repeat)


if __name__ == "__main__":
    main()
