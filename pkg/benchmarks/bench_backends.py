"""Compare the compiled kernel core against the numpy fallback.

Times the hot kernels (3D conv forward/backward, maxpool, upsampling) on a
few representative shapes plus one full supernet training step, and prints a
table with the speedup of the compiled path.

Usage: python benchmarks/bench_backends.py [--reps N]
"""

import argparse
import statistics
import time

import numpy as np

import nas_rt.backend as backend
from nas_rt import autodiff as ad
from nas_rt import data, ops, space


def timed(fn, reps):
    fn()  # warm caches
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def kernel_cases(rng):
    cases = []
    for (n, c, d, h, w) in [(1, 4, 8, 16, 16), (2, 8, 8, 16, 16),
                            (1, 16, 4, 8, 8)]:
        x = rng.uniform(-1, 1, (n, c, d, h, w))
        wt = rng.uniform(-1, 1, (c, c, 3, 3, 3))
        gy = rng.uniform(-1, 1, (n, c, d, h, w))
        shape = f"{n}x{c}x{d}x{h}x{w}"
        cases.append((f"conv3d fwd {shape}",
                      lambda k, x=x, wt=wt: k.conv3d_forward(x, wt, 1, 1, 1, 1)))
        cases.append((f"conv3d bwd-x {shape}",
                      lambda k, gy=gy, wt=wt, s=x.shape:
                      k.conv3d_backward_input(gy, wt, s, 1, 1, 1, 1)))
        cases.append((f"conv3d bwd-w {shape}",
                      lambda k, gy=gy, x=x, s=wt.shape:
                      k.conv3d_backward_weight(gy, x, s, 1, 1, 1, 1)))
        cases.append((f"maxpool3d {shape}",
                      lambda k, x=x: k.maxpool3d_forward(x, 3, 1, 1)))
        cases.append((f"upsample2x {shape}",
                      lambda k, x=x: k.upsample2x_forward(x)))
    return cases


def supernet_step_case():
    cfg = space.SearchConfig().validate()
    net, params = space.build_supernet(cfg, 0)
    ds = data.gen_synthetic(2, cfg.input_shape, cfg.num_classes, seed=0)
    x = ad.Tensor(np.stack([s.image for s in ds.samples]))
    y = np.stack([s.label for s in ds.samples])

    def step():
        loss = ops.cross_entropy(space.network_forward(net, x, params), y)
        for t in net.all_tensors():
            t.zero_grad()
        ad.backward(loss)

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=9)
    args = parser.parse_args()

    if not backend.HAS_COMPILED:
        print("compiled backend not built; run pip install -e . first")
        return 1

    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng):
        times = {}
        for bname in ("python", "compiled"):
            k = backend.get_kernels(bname)
            times[bname] = timed(lambda: fn(k), args.reps)
        rows.append((name, times["python"], times["compiled"]))

    step = supernet_step_case()
    times = {}
    for bname in ("python", "compiled"):
        backend.use(bname)
        times[bname] = timed(step, max(3, args.reps // 3))
    rows.append(("supernet train step", times["python"], times["compiled"]))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'python':>10}  {'compiled':>10}  {'speedup':>7}")
    for name, py, cy in rows:
        print(f"{name:<{width}}  {py * 1e3:>8.3f}ms  {cy * 1e3:>8.3f}ms  "
              f"{py / cy:>6.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
