"""Compare the compiled and numpy kernel backends on the paths that matter.

Per-kernel timings use representative shapes from the stock model
(32x32 single-channel input, two conv blocks).  Whole-path timings
cover the two hot loops: ``model.predict`` (perturbation methods) and
a full input-gradient step (scenario generation, gradient methods).

Run:  python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import contextlib
import statistics
import time

import numpy as np

from axiombench import _kernels_np

try:
    from axiombench import _kernels_cy
except ImportError:
    _kernels_cy = None

from axiombench import autodiff, micronet
from axiombench.autodiff import ExprGraph, gradient


def timeit(fn, repeats):
    fn()  # warm caches and JIT-less import costs
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


@contextlib.contextmanager
def use_kernels(module):
    """Route every kernel call site through `module` for the duration."""
    saved = (micronet.kernels, autodiff.kernels)
    micronet.kernels = module
    autodiff.kernels = module
    try:
        yield
    finally:
        micronet.kernels, autodiff.kernels = saved


def kernel_cases(rng):
    x1 = rng.standard_normal((1, 32, 32))
    w1 = rng.standard_normal((8, 1, 3, 3))
    b1 = rng.standard_normal(8)
    x2 = rng.standard_normal((8, 16, 16))
    w2 = rng.standard_normal((16, 8, 3, 3))
    b2 = rng.standard_normal(16)
    g1 = rng.standard_normal((8, 32, 32))
    g2 = rng.standard_normal((16, 16, 16))
    pool_in = rng.standard_normal((8, 32, 32))

    def cases(k):
        pooled, idx = k.maxpool2_forward(pool_in)
        return [
            ("conv_fwd 1->8 32x32", lambda: k.conv2d_forward(x1, w1, b1, 1, 1)),
            ("conv_fwd 8->16 16x16", lambda: k.conv2d_forward(x2, w2, b2, 1, 1)),
            ("conv_bwd_full 1->8", lambda: k.conv2d_backward(x1, w1, g1, 1, 1)),
            ("conv_bwd_full 8->16", lambda: k.conv2d_backward(x2, w2, g2, 1, 1)),
            ("conv_bwd_x 1->8", lambda: k.conv2d_backward_x(w1, g1, x1.shape, 1, 1)),
            ("conv_bwd_x 8->16", lambda: k.conv2d_backward_x(w2, g2, x2.shape, 1, 1)),
            ("maxpool_fwd 8x32x32", lambda: k.maxpool2_forward(pool_in)),
            ("maxpool_bwd 8x32x32",
             lambda: k.maxpool2_backward(pooled, idx, pool_in.shape)),
        ]
    return cases


def whole_path_cases(model, rng):
    x = np.clip(0.5 * rng.standard_normal(model.input_shape), -1.0, 1.0)

    def predict():
        model.predict(x)

    def gradient_step():
        graph = ExprGraph()
        leaf = graph.leaf(x)
        logits, _, _ = model.apply(graph, leaf)
        phi = graph.take(logits, 3)
        gradient(graph, phi, [leaf])

    return [("model.predict", predict),
            ("input-gradient step", gradient_step)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = [("numpy", _kernels_np)]
    if _kernels_cy is not None:
        backends.append(("cython", _kernels_cy))
    else:
        print("compiled backend not built; timing numpy only")

    rng = np.random.default_rng(0)
    model = micronet.build_classifier(micronet.ArchConfig(), seed=21)
    cases = kernel_cases(rng)

    results = {}
    for name, module in backends:
        for label, fn in cases(module):
            results.setdefault(label, {})[name] = timeit(fn, args.repeats)
        with use_kernels(module):
            for label, fn in whole_path_cases(model, rng):
                results.setdefault(label, {})[name] = timeit(fn, args.repeats)

    width = max(len(label) for label in results)
    header = f"{'case':<{width}}  numpy (us)"
    if _kernels_cy is not None:
        header += "  cython (us)  speedup"
    print(header)
    print("-" * len(header))
    for label, times in results.items():
        line = f"{label:<{width}}  {times['numpy'] * 1e6:10.1f}"
        if "cython" in times:
            ratio = times["numpy"] / times["cython"]
            line += f"  {times['cython'] * 1e6:11.1f}  {ratio:6.2f}x"
        print(line)

    from axiombench.backend import backend_name
    print(f"\nactive backend (AXIOMBENCH_BACKEND=auto): {backend_name()}")


if __name__ == "__main__":
    main()
